// temporary probe for acceptance calibration; removed before finalizing
use fairagg::aggregation::{mv_aggregate, soft_ds_fit, SoftDsOptions, WeightedLabels};
use fairagg::data::{ConfusionMatrix, DirichletHyper};
use fairagg::fairness::{split_aggregate, weighted_mv};
use fairagg::metrics::mae;
use fairagg::synthgen::{gen_biased_data, gen_spammer_data, GenSpec};

#[test]
#[ignore]
fn probe_spammer() {
    let hyper = DirichletHyper::diagonal(2, 7.0, 2.0).unwrap();
    for seed in 0..3u64 {
        let mut line = format!("seed {seed}:");
        for spammers in [0usize, 50, 200, 500] {
            let spec = GenSpec {
                num_voters_per_attr: (200, 0),
                num_tasks: 300,
                num_spammers: spammers,
                seed,
                ..GenSpec::default()
            };
            let bundle = gen_spammer_data(&spec).unwrap();
            let data = WeightedLabels::unit(bundle.labels.clone());
            let mv = mae(&mv_aggregate(&data).unwrap(), &bundle.true_soft).unwrap();
            let t0 = std::time::Instant::now();
            let soft = soft_ds_fit(&data, &hyper, &SoftDsOptions::default()).unwrap();
            let sm = mae(&soft.state.posteriors, &bundle.true_soft).unwrap();
            line.push_str(&format!(
                "  [s={spammers}] mv {mv:.4} soft {sm:.4} ({:?}, {} rounds)",
                t0.elapsed(),
                soft.rounds
            ));
        }
        println!("{line}");
    }
}

#[test]
#[ignore]
fn probe_fairness_synth() {
    let hyper = DirichletHyper::flat(2);
    let group0 = ConfusionMatrix::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let group1 = ConfusionMatrix::new(vec![vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
    for seed in 0..3u64 {
        for tasks in [100usize, 300] {
            let spec = GenSpec {
                num_voters_per_attr: (200, 400),
                num_tasks: tasks,
                group_matrices: Some([group0.clone(), group1.clone()]),
                seed,
                ..GenSpec::default()
            };
            let bundle = gen_biased_data(&spec).unwrap();
            let unweighted = mae(
                &mv_aggregate(&WeightedLabels::unit(bundle.labels.clone())).unwrap(),
                &bundle.true_soft,
            )
            .unwrap();
            let weighted = mae(
                &weighted_mv(&bundle.labels, &bundle.attrs).unwrap(),
                &bundle.true_soft,
            )
            .unwrap();
            let t0 = std::time::Instant::now();
            let (split_soft, _) = split_aggregate(&bundle.labels, &bundle.attrs, |m| {
                Ok(soft_ds_fit(
                    &WeightedLabels::unit(m.clone()),
                    &hyper,
                    &SoftDsOptions::default(),
                )?
                .state
                .posteriors)
            })
            .unwrap();
            let split_mae = mae(&split_soft, &bundle.true_soft).unwrap();
            println!(
                "seed {seed} J={tasks}: mv {unweighted:.4}  wmv {weighted:.4}  softds+split {split_mae:.4} ({:?})",
                t0.elapsed()
            );
        }
    }
}
