//! Recover a rigid transform from corresponding point sets, including a
//! mirrored target where only a proper rotation is allowed.

use rigidsim::geometry::{apply_rigid, axis_angle, det, kabsch_align, RigidTransform, Vec3};

fn main() {
    let src: Vec<Vec3> = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0], [1.0, 1.0, 1.0]];
    let truth = RigidTransform::new(axis_angle([1.0, 2.0, 3.0].map(|v: f64| v / 14f64.sqrt()), 0.9), [0.5, -1.0, 2.0]);
    let dst = apply_rigid(&truth, &src);

    let fit = kabsch_align(&src, &dst).expect("well-conditioned points");
    let err = fit
        .transform
        .to_rt_rows()
        .iter()
        .zip(truth.to_rt_rows())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("recovered transform, max entry error {err:.2e}, det {:.6}", det(&fit.transform.r));

    let mirrored: Vec<Vec3> = dst.iter().map(|p| [-p[0], p[1], p[2]]).collect();
    let fit = kabsch_align(&src, &mirrored).expect("well-conditioned points");
    println!("mirrored target: det {:.6} (a reflection is never returned)", det(&fit.transform.r));
}
