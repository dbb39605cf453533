//! Whole-pipeline checks: corrected SMC against exact targets, and the
//! Ising annealing identity.

use dfkc::ising::{exact_boltzmann, AnnealExperiment, AnnealParams, BoltzmannSpec, IsingModel};
use dfkc::oracle::{target_distribution, tv_distance};
use dfkc::smc::{self, weighted_histogram, StepModeConfig};
use dfkc::{
    Denoiser, MaskingSchedule, ResamplingPolicy, SmcConfig, TabularDataDistribution, TabularDenoiser, TargetSpec,
    Vocabulary,
};

fn fixture() -> TabularDataDistribution {
    TabularDataDistribution::new(Vocabulary::new(2).unwrap(), 2, vec![0.4, 0.1, 0.3, 0.2]).unwrap()
}

fn smc_tv(target: &TargetSpec, datas: &[TabularDataDistribution], config: &SmcConfig) -> f64 {
    let schedule = MaskingSchedule::linear();
    let dens: Vec<TabularDenoiser> = datas.iter().cloned().map(TabularDenoiser::new).collect();
    let refs: Vec<&dyn Denoiser> = dens.iter().map(|d| d as &dyn Denoiser).collect();
    let run = smc::run(target, &refs, &schedule, config).unwrap();
    let hist = weighted_histogram(&run.ensemble, datas[0].vocab()).unwrap();
    let data_refs: Vec<_> = datas.iter().collect();
    let exact = target_distribution(&data_refs, target, &schedule, 0.0)
        .unwrap()
        .unmasked_part();
    tv_distance(&hist, &exact).unwrap()
}

#[test]
fn base_sampling_recovers_the_data() {
    let config = SmcConfig::new(8192, 100, 5).with_policy(ResamplingPolicy::systematic_adaptive());
    let tv = smc_tv(&TargetSpec::Base, &[fixture()], &config);
    assert!(tv < 0.02, "TV {tv}");
}

#[test]
fn annealed_sampling_recovers_the_tempered_data() {
    let data = TabularDataDistribution::new(Vocabulary::new(2).unwrap(), 1, vec![0.8, 0.2]).unwrap();
    let config = SmcConfig::new(8192, 200, 6).with_policy(ResamplingPolicy::systematic_adaptive());
    let tv = smc_tv(&TargetSpec::Anneal { beta: 2.0 }, &[data], &config);
    assert!(tv < 0.03, "TV {tv}");
}

#[test]
fn first_order_annealing_on_two_positions() {
    let mut config = SmcConfig::new(8192, 200, 7).with_policy(ResamplingPolicy::systematic_adaptive());
    config.step_mode = StepModeConfig::FirstOrder;
    let tv = smc_tv(&TargetSpec::Anneal { beta: 2.0 }, &[fixture()], &config);
    assert!(tv < 0.03, "TV {tv}");
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let q = TabularDataDistribution::new(Vocabulary::new(2).unwrap(), 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let dens = [TabularDenoiser::new(fixture()), TabularDenoiser::new(q)];
    let refs: Vec<&dyn Denoiser> = dens.iter().map(|d| d as &dyn Denoiser).collect();
    let config = SmcConfig::new(512, 50, 9);
    let run_with = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| smc::run(&TargetSpec::Product, &refs, &MaskingSchedule::linear(), &config).unwrap())
    };
    let (a, b) = (run_with(1), run_with(4));
    assert_eq!(a.ensemble.particles, b.ensemble.particles);
    assert_eq!(a.ensemble.log_weights, b.ensemble.log_weights);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn annealed_ising_data_is_the_colder_boltzmann_distribution() {
    for (l, beta, mult) in [(2, 0.3, 4.0 / 3.0), (3, 0.25, 1.6), (3, 0.4, 0.5)] {
        let model = IsingModel::ferromagnet(l).unwrap();
        let warm = exact_boltzmann(&BoltzmannSpec::new(model, beta).unwrap()).unwrap();
        let cold = exact_boltzmann(&BoltzmannSpec::new(model, beta * mult).unwrap()).unwrap();
        let annealed = target_distribution(
            &[&warm.data],
            &TargetSpec::Anneal { beta: mult },
            &MaskingSchedule::linear(),
            0.0,
        )
        .unwrap()
        .unmasked_part();
        let tv = tv_distance(&annealed, cold.data.probs()).unwrap();
        assert!(tv < 1e-12, "L={l}: TV {tv}");
    }
}

#[test]
fn ising_anneal_smoke() {
    let model = IsingModel::ferromagnet(3).unwrap();
    let experiment = AnnealExperiment::new(&BoltzmannSpec::new(model, 0.3).unwrap()).unwrap();
    let params = AnnealParams {
        k: 4096,
        n_steps: 100,
        policy: ResamplingPolicy::systematic_adaptive(),
        step_mode: StepModeConfig::FirstOrder,
        reference_samples: 5000,
        ..AnnealParams::default()
    };
    let outcome = experiment.run(4.0 / 3.0, &params).unwrap();
    let r = &outcome.report;
    assert_eq!(outcome.samples.len(), 4096);
    assert!((r.beta_target - 0.4).abs() < 1e-12);
    assert!(
        (r.mean_energy - r.exact_mean_energy).abs() < 1.5,
        "{} vs {}",
        r.mean_energy,
        r.exact_mean_energy
    );
    assert!((r.mean_magnetization - r.exact_mean_magnetization).abs() < 0.08);
    assert!(r.terminal_ess > 1.0);
    let reference = r.reference.as_ref().unwrap();
    assert_eq!(reference.samples, 5000);
}
