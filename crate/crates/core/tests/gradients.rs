//! Finite-difference checks of every op and the whole U-Net, in f64.

use edgebias::verify::{gradcheck_suite, MODEL_TOLERANCE, OP_TOLERANCE};

#[test]
fn suite_passes_on_several_seeds() {
    for seed in [1, 7, 1234] {
        let reports = gradcheck_suite(seed).unwrap();
        assert!(reports.len() > 20);
        for r in &reports {
            assert!(r.pass, "seed {seed}: {r}");
            let tol = if r.name.starts_with("unet") { MODEL_TOLERANCE } else { OP_TOLERANCE };
            assert_eq!(r.tolerance, tol, "{}", r.name);
            assert!(r.checked > 0, "{}", r.name);
        }
    }
}

#[test]
fn every_padding_mode_and_kernel_size_is_covered() {
    let names: Vec<String> = gradcheck_suite(0).unwrap().into_iter().map(|r| r.name).collect();
    for mode in ["zero", "circular", "reflect", "random"] {
        assert!(names.iter().any(|n| n.starts_with("pad/") && n.contains(mode)), "pad {mode}");
        for k in ["k1", "k3", "k5"] {
            assert!(
                names.iter().any(|n| n.starts_with("conv2d/") && n.contains(mode) && n.contains(k)),
                "conv {mode} {k} in {names:?}"
            );
        }
    }
}
