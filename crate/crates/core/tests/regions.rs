use proptest::prelude::*;

use rkhs_conformal::approx::{ApproxConformal, ApproxKind, ApproxMethod};
use rkhs_conformal::conformal::{full_pvalue_curve, YGrid};
use rkhs_conformal::data::{friedman1, load_csv, save_csv};
use rkhs_conformal::kernels::KernelSpec;
use rkhs_conformal::losses::LossSpec;

fn loss_strategy() -> impl Strategy<Value = LossSpec> {
    prop_oneof![
        (0.3f64..3.0).prop_map(|a| LossSpec::Logcosh { a }),
        (0.3f64..3.0).prop_map(|a| LossSpec::PseudoHuber { a }),
        (0.2f64..2.0, 0.1f64..0.9).prop_map(|(a, t)| LossSpec::SmoothedPinball { a, t }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn approximate_pvalues_bracket_the_exact_curve(
        n in 5usize..14,
        seed in 0u64..1_000,
        lambda in 0.05f64..2.0,
        z in -5.0f64..20.0,
        loss in loss_strategy(),
        gaussian in any::<bool>(),
    ) {
        let kernel = if gaussian { KernelSpec::gaussian(0.3) } else { KernelSpec::default() };
        let (task, _) = friedman1(n + 1, 0.5, seed).unwrap().into_task(kernel, loss, lambda).unwrap();
        let grid = YGrid::covering(&task.y, 0.5, 31).unwrap();
        let full = full_pvalue_curve(&task, grid).unwrap();
        let base = ApproxConformal::new(&task, ApproxMethod { kind: ApproxKind::UniformStability, z_anchor: z }).unwrap();
        let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
        for kind in [ApproxKind::UniformStability, ApproxKind::LocalStability] {
            let c = base.with_kind(kind).unwrap().curve(grid);
            for i in 0..grid.m {
                prop_assert!(c.lower[i] <= full.upper[i] && full.upper[i] <= c.upper[i], "{kind} at {i}");
            }
            if let Some((up0, lo0)) = &previous {
                for i in 0..grid.m {
                    prop_assert!(c.upper[i] <= up0[i] && lo0[i] <= c.lower[i]);
                }
            }
            previous = Some((c.upper, c.lower));
        }
        let c = base.with_kind(ApproxKind::InfluenceFunction).unwrap().curve(grid);
        for i in 0..grid.m {
            prop_assert!(c.lower[i] <= full.upper[i] && full.upper[i] <= c.upper[i], "IF at {i}");
        }
    }
}

#[test]
fn csv_data_gives_the_same_regions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let ds = friedman1(16, 0.2, 5).unwrap();
    save_csv(&path, &ds).unwrap();
    let back = load_csv(&path).unwrap();
    let spec = KernelSpec::default();
    let loss = LossSpec::default();
    let (t1, _) = ds.into_task(spec, loss, 0.4).unwrap();
    let (t2, _) = back.into_task(spec, loss, 0.4).unwrap();
    let grid = YGrid::covering(&t1.y, 0.5, 41).unwrap();
    let m = ApproxMethod::new(ApproxKind::InfluenceFunction);
    let r1 = ApproxConformal::new(&t1, m).unwrap().regions(grid, 0.1);
    let r2 = ApproxConformal::new(&t2, m).unwrap().regions(grid, 0.1);
    assert_eq!(r1, r2);
}
