use bykov::manifolds::*;
use bykov::scanner::ScanOptions;
use bykov::model::{equilibria, ModelParams};
use bykov::geom::{normalize4, dist4};
use bykov::integrator::{integrate_system, ModelField, IntegratorOptions, EventSpec};
fn main() {
    let p = ModelParams::reference(0.0241664, 0.0031860);
    let opts = ScanOptions::default();
    let mopts = opts.manifold;
    let [_, w] = equilibria(&p).unwrap();
    let loop_iopts = IntegratorOptions { max_step: 0.03, ..mopts.integrator };
    let mopts_loop = ManifoldOptions { integrator: loop_iopts, ..mopts };
    let psi: f64 = 0.061723752_f64;
    // replicate radius_at exactly
    let top = SectionDef::new(SectionTarget::WTopInUpper, mopts.geometry);
    let (s, c) = psi.sin_cos();
    let mut x = w.location;
    x[0] += mopts.seed_offset * c;
    x[1] += mopts.seed_offset * s;
    let x = normalize4(&x);
    match cross_section(&p, &x, &top, false, 0, &mopts_loop) {
        Ok(Some(cp)) => println!("cross_section arrival radius {:.3e} at t={:.2}", (cp.state[0].powi(2)+cp.state[1].powi(2)).sqrt(), cp.t),
        other => println!("cross_section: {:?}", other.map(|o| o.map(|c| c.t))),
    }
    // now raw integration from the same x without events
    let field = ModelField { params: p, reversed: false };
    let proj = |xx: &mut [f64;4]| *xx = normalize4(xx);
    let (raw, _) = integrate_system(&field, x, (0.0, 400.0), &loop_iopts, &[], Some(&proj), None).unwrap();
    let mut best = (f64::INFINITY, 0.0);
    for (t, st) in &raw.samples {
        let d = dist4(st, &w.location);
        if *t > 5.0 && d < best.0 { best = (d, *t); }
    }
    println!("no-event run: min dist to w (t>5) {:.3e} at t={:.2}", best.0, best.1);
    // and with the same event present (no stop)
    let surf = |st: &[f64;4]| top.surface_value(st);
    let gate = |st: &[f64;4]| top.gate(st);
    let ev = EventSpec::new(&surf, top.direction(false)).with_gate(&gate);
    let (raw2, evs) = integrate_system(&field, x, (0.0, 400.0), &loop_iopts, &[ev], Some(&proj), None).unwrap();
    let mut best2 = (f64::INFINITY, 0.0);
    for (t, st) in &raw2.samples {
        let d = dist4(st, &w.location);
        if *t > 5.0 && d < best2.0 { best2 = (d, *t); }
    }
    println!("with-event run: min dist {:.3e} at t={:.2}; first event r={:.3e}",
        best2.0, best2.1,
        evs.first().map(|e| (e.state[0].powi(2)+e.state[1].powi(2)).sqrt()).unwrap_or(f64::NAN));
}
