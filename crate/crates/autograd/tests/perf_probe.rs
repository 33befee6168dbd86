use emogan_autograd::ops::conv::{conv_fwd, conv_igrad, conv_wgrad};
use emogan_autograd::ops::ConvGeom;
use emogan_autograd::Data;
use ndarray::IxDyn;
use std::time::Instant;

#[test]
fn perf_probe() {
    // Typical shapes for the desk-scale run (64x64 images, batch 8).
    let cases = [
        ("enc2 32->64 s2 @32", ConvGeom::new(32, 64, 4, 2, 1, 32, 32)),
        ("fu 128->128 @16", ConvGeom::new(128, 128, 3, 1, 1, 16, 16)),
        ("enc1 7->32 k7 @64", ConvGeom::new(7, 32, 7, 1, 3, 64, 64)),
        ("d2 128->256 s2 @8", ConvGeom::new(128, 256, 4, 2, 1, 8, 8)),
        ("d4 512->1024 s2 @2", ConvGeom::new(512, 1024, 4, 2, 1, 2, 2)),
    ];
    for (name, g) in cases {
        let x = Data::<f32>::from_elem(IxDyn(&[8, g.in_ch, g.h, g.w]), 0.3);
        let w = Data::<f32>::from_elem(IxDyn(&[g.out_ch, g.in_ch, g.kernel, g.kernel]), 0.1);
        let z = Data::<f32>::from_elem(IxDyn(&[8, g.out_ch, g.oh, g.ow]), 0.2);
        let flops = 2.0 * 8.0 * (g.out_ch * g.in_ch * g.kernel * g.kernel * g.oh * g.ow) as f64;
        for (kind, f) in [
            ("fwd", Box::new(|| { conv_fwd(&x, &w, &g); }) as Box<dyn Fn()>),
            ("igrad", Box::new(|| { conv_igrad(&z, &w, &g); })),
            ("wgrad", Box::new(|| { conv_wgrad(&x, &z, &g); })),
        ] {
            let reps = 20;
            let t0 = Instant::now();
            for _ in 0..reps { f(); }
            let dt = t0.elapsed().as_secs_f64() / reps as f64;
            println!("{name:24} {kind:6} {:8.3} ms  {:6.1} GFLOP/s", dt * 1e3, flops / dt / 1e9);
        }
    }
}
