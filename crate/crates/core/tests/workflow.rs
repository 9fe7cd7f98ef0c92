use ctseg::experiment::{acquire, ExperimentConfig};
use ctseg::io::{load_sinogram, load_volume, save_sinogram, save_volume};
use ctseg::phantom::{generate, jittered_spec, PhantomSpec};
use ctseg::pipeline::{run_full, train_all, StageId};
use ctseg::segmodel::SoftmaxModel;
use ctseg::tomo::{forward_project, DoseLevel};
use ctseg::volume::{ClassId, Dims, FloatVolume, LabelVolume};

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        phantom: PhantomSpec::with_dims(Dims::cube(40)),
        doses: vec![DoseLevel::FULL],
        seed: 2,
        ..Default::default()
    };
    cfg.set_epochs(10);
    for s in &mut cfg.stages {
        s.hyper.learning_rate = 1e-2;
    }
    cfg
}

#[test]
fn files_survive_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let ph = generate(&cfg.phantom).unwrap();
    save_volume(&ph.attenuation, dir.path().join("a.vol")).unwrap();
    save_volume(&ph.labels, dir.path().join("l.vol")).unwrap();
    let a: FloatVolume = load_volume(dir.path().join("a.vol")).unwrap();
    let l: LabelVolume = load_volume(dir.path().join("l.vol")).unwrap();
    assert_eq!(a, ph.attenuation);
    assert_eq!(l, ph.labels);
    assert!(load_volume::<u16>(dir.path().join("l.vol")).is_err());

    let sino = forward_project(&ph.attenuation, &cfg.acquisition).unwrap();
    save_sinogram(&sino, dir.path().join("s.sino")).unwrap();
    assert_eq!(load_sinogram(dir.path().join("s.sino")).unwrap(), sino);
}

#[test]
fn trained_pipeline_segments_a_held_out_phantom() {
    let cfg = small_config();
    let members: Vec<_> = (0..3)
        .map(|i| acquire(&generate(&jittered_spec(&cfg.phantom, i)).unwrap(), &cfg).unwrap())
        .collect();
    let d = DoseLevel::FULL;
    let pairs: Vec<_> = members[..2].iter().map(|m| (m.at(d).unwrap(), &m.labels)).collect();
    let models = train_all(&cfg.pipeline(), &pairs, cfg.seed).unwrap();
    let (seg, trace) = run_full(&cfg.pipeline(), models.segmenters(), members[2].at(d).unwrap(), false).unwrap();

    let hist = seg.histogram();
    for c in [ClassId::Atrium, ClassId::Ventricle, ClassId::Bulbus] {
        assert!(hist[c as usize] > 0, "{c} missing");
    }
    assert_eq!(trace.stage_histograms.len(), 3);
    assert!(trace.timings_s.is_empty());

    // saved models reload to the same predictions
    for id in StageId::ALL {
        let m = &models.models[id.index()];
        let (back, _) = SoftmaxModel::from_json(&m.to_json(&models.meta[id.index()])).unwrap();
        assert_eq!(&back, m);
    }
}
