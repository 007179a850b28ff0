//! Cross-module properties of the solver family on closed-form mixture
//! fields: scale-time solvers and exponential integrators reproduced by
//! their non-stationary embeddings, in f64 and f32.

use bns_core::field::{from_velocity, gmm_marginal_velocity, GaussianMixture, SharedField};
use bns_core::nsparams::{embed_generic, embed_st_solver, NSSolverParams};
use bns_core::scheduler::Scheduler;
use bns_core::solver::{solve_adaptive_rk45, solve_ns, Method, Rk45Options, TimeGrid};
use bns_core::train::ddim_params;
use bns_core::transform::{apply_st_to_field, ei_transform, st_from_scheduler_change, STTransform};
use bns_core::{Parameterization, Real, Scheduler64};

fn mixture<R: Real>() -> GaussianMixture<R> {
    let l = |v: f64| R::lit(v);
    GaussianMixture::new(vec![l(0.35), l(0.65)], vec![vec![l(0.7), l(-0.2)], vec![l(-0.5), l(0.4)]], vec![l(0.25), l(0.15)]).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Native solve of the transformed field from `s_0 x_0`, mapped back by `s_1`.
fn st_native(method: &Method<f64>, tr: &STTransform<f64>, u: &SharedField<f64>, x0: &[f64], nfe: usize) -> Vec<f64> {
    let (s0, s1) = (tr.eval(0.0).unwrap().s, tr.eval(1.0).unwrap().s);
    let bar = apply_st_to_field(u.clone(), tr);
    let start: Vec<f64> = x0.iter().map(|v| s0 * v).collect();
    method.solve(&*bar, &start, nfe).unwrap().final_state().iter().map(|v| v / s1).collect()
}

#[test]
fn st_solvers_match_their_embeddings() {
    let u = gmm_marginal_velocity(mixture::<f64>(), Scheduler::Ot).unwrap();
    let transforms = [
        st_from_scheduler_change(&Scheduler::Ot, &Scheduler::CosineCs).unwrap(),
        // α_0 = 0 makes s_0 = 1/α_0 singular on OT; VP keeps it finite
        ei_transform(Parameterization::EpsPred, &Scheduler::vp()).unwrap(),
        STTransform::Scale(2.5),
    ];
    let x0 = [0.8, -1.1];
    for tr in &transforms {
        for (method, nfe) in [(Method::euler(), 6), (Method::midpoint(), 8), (Method::rk4(), 8)] {
            let theta = embed_st_solver(&method, tr, nfe).unwrap();
            let ns = solve_ns(&theta, &*u, &x0).unwrap();
            let native = st_native(&method, tr, &u, &x0, nfe);
            let dev = max_abs_diff(ns.final_state(), &native);
            assert!(dev < 1e-9, "{} / {tr:?}: {dev}", method.name());
        }
    }
}

#[test]
fn ddim_matches_closed_form_update_on_vp() {
    let vp = Scheduler64::vp();
    let u = gmm_marginal_velocity(mixture::<f64>(), vp.clone()).unwrap();
    let eps = from_velocity(u.clone(), Parameterization::EpsPred, vp.clone());
    let nfe = 10;
    let theta = ddim_params(&vp, nfe).unwrap();
    let grid = TimeGrid::<f64>::uniform(nfe).unwrap();
    let t = grid.times();
    let mut x = vec![0.3, -0.9];
    for i in 0..nfe {
        let (p, q) = (vp.eval(t[i]).unwrap(), vp.eval(t[i + 1]).unwrap());
        let mut e = vec![0.0; 2];
        eps.eval(t[i], &x, &mut e).unwrap();
        let r = q.alpha / p.alpha;
        x = x.iter().zip(&e).map(|(xi, ei)| r * xi + (q.sigma - p.sigma * r) * ei).collect();
    }
    let ns = solve_ns(&theta, &*u, &[0.3, -0.9]).unwrap();
    assert!(max_abs_diff(ns.final_state(), &x) < 1e-9, "{:?} vs {x:?}", ns.final_state());
}

#[test]
fn solvers_converge_to_the_oracle() {
    let u = gmm_marginal_velocity(mixture::<f64>(), Scheduler::CosineCs).unwrap();
    let x0 = [-0.4, 1.3];
    let opts = Rk45Options { rtol: 1e-10, atol: 1e-10, ..Rk45Options::default() };
    let truth = solve_adaptive_rk45(&*u, &x0, &opts).unwrap().state;
    let err = |theta: &NSSolverParams<f64>| max_abs_diff(solve_ns(theta, &*u, &x0).unwrap().final_state(), &truth);
    let coarse = err(&embed_generic(&Method::rk4(), 8).unwrap());
    let fine = err(&embed_generic(&Method::rk4(), 64).unwrap());
    assert!(fine < 1e-3 && fine < coarse / 100.0, "{coarse} -> {fine}");
}

#[test]
fn single_precision_tracks_double() {
    let u64_ = gmm_marginal_velocity(mixture::<f64>(), Scheduler::Ot).unwrap();
    let u32_ = gmm_marginal_velocity(mixture::<f32>(), Scheduler::Ot).unwrap();
    let x0 = [0.6f64, -0.3];
    let x0f: Vec<f32> = x0.iter().map(|&v| v as f32).collect();
    for nfe in [4, 16] {
        let a = solve_ns(&embed_generic::<f64>(&Method::midpoint(), nfe).unwrap(), &*u64_, &x0).unwrap();
        let b = solve_ns(&embed_generic::<f32>(&Method::midpoint(), nfe).unwrap(), &*u32_, &x0f).unwrap();
        for (p, q) in a.final_state().iter().zip(b.final_state()) {
            assert!((p - *q as f64).abs() < 1e-5, "nfe {nfe}: {p} vs {q}");
        }
    }
    let a = solve_adaptive_rk45(&*u64_, &x0, &Rk45Options::default()).unwrap().state;
    let b = solve_adaptive_rk45(&*u32_, &x0f, &Rk45Options { rtol: 1e-5, atol: 1e-5, ..Rk45Options::default() }).unwrap().state;
    for (p, q) in a.iter().zip(&b) {
        assert!((p - *q as f64).abs() < 1e-4, "{p} vs {q}");
    }
}
