// temporary probe; removed before finalizing
use fairagg::aggregation::{mv_aggregate, soft_ds_fit, SoftDsOptions, WeightedLabels};
use fairagg::data::DirichletHyper;
use fairagg::metrics::mae;
use fairagg::synthgen::{gen_spammer_data, GenSpec};

#[test]
#[ignore]
fn probe_spammer_rounds() {
    let hyper = DirichletHyper::diagonal(2, 7.0, 2.0).unwrap();
    let spec = GenSpec {
        num_voters_per_attr: (200, 0),
        num_tasks: 300,
        num_spammers: 500,
        seed: 0,
        ..GenSpec::default()
    };
    let bundle = gen_spammer_data(&spec).unwrap();
    let data = WeightedLabels::unit(bundle.labels.clone());
    let mv = mv_aggregate(&data).unwrap();
    println!("mv mae {:.4}", mae(&mv, &bundle.true_soft).unwrap());

    for rounds in [1usize, 2, 5, 10, 20, 40] {
        let opts = SoftDsOptions {
            tol: 0.0,
            max_rounds: rounds,
            ..SoftDsOptions::default()
        };
        let t0 = std::time::Instant::now();
        let fit = soft_ds_fit(&data, &hyper, &opts).unwrap();
        let m = mae(&fit.state.posteriors, &bundle.true_soft).unwrap();
        let drift = mae(&fit.state.posteriors, &mv).unwrap();
        let normal_pi = &fit.state.confusions[0];
        let spam_pi = &fit.state.confusions[400];
        println!(
            "rounds {rounds:>2}: mae {m:.4} |z-mv| {drift:.4}  L {:.2}  normal pi [{:.3} {:.3}; {:.3} {:.3}]  spam pi [{:.3} {:.3}; {:.3} {:.3}]  ({:?})",
            fit.posterior_trace.last().unwrap(),
            normal_pi.get(0, 0), normal_pi.get(0, 1), normal_pi.get(1, 0), normal_pi.get(1, 1),
            spam_pi.get(0, 0), spam_pi.get(0, 1), spam_pi.get(1, 0), spam_pi.get(1, 1),
            t0.elapsed()
        );
    }
}
