use diagflow::bench::{ColumnNames, Dataset};
use diagflow::eval::forward_mse;
use diagflow::flow::TrainConfig;
use diagflow::inn::{train_inn, InnArch, InnDims, InnModel, InnObjective};
use diagflow::matrix::Matrix;
use diagflow::nn::Activation;
use diagflow::persist::{load_model, save_model, SavedModel};
use diagflow::rng::{derive_seed, seeded};
use rand::Rng;

fn padded_identity(n: usize, seed: u64) -> Dataset {
    let mut rng = seeded(seed);
    let x = Matrix::from_fn(n, 2, |_, _| rng.random::<f64>());
    let y = x.columns(1, 2).map(|v| 2.0 * v - 0.5);
    let columns = ColumnNames {
        design: vec!["pad".into(), "x".into()],
        label: vec!["y".into()],
        condition: Vec::new(),
    };
    Dataset::new(x, y, None, columns).unwrap()
}

fn setup() -> (TrainConfig, InnArch) {
    (
        TrainConfig {
            epochs: 80,
            batch_size: 50,
            learning_rate: 3e-3,
            lr_schedule: None,
            seed: 4,
        },
        InnArch {
            blocks: 2,
            hidden_widths: vec![32, 32],
            activation: Activation::LeakyRelu,
            clamp: 2.0,
        },
    )
}

#[test]
fn inn_toy_learns_forward_map() {
    let data = padded_identity(1000, 1);
    let (cfg, arch) = setup();
    let dims = InnDims {
        design_dim: 2,
        label_dim: 1,
        cond_dim: 0,
    };
    let untrained = InnModel::init(dims, &arch, derive_seed(cfg.seed, "inn/init")).unwrap();
    let initial = forward_mse(&untrained, &data.x, &data.y, None).unwrap().mean;
    let trained = train_inn(&cfg, &arch, &InnObjective::default(), &data).unwrap();
    let fin = forward_mse(&trained.model, &data.x, &data.y, None).unwrap().mean;
    assert!(initial > 0.05, "initial {initial}");
    assert!(fin < 0.1 * initial, "forward MSE {initial} -> {fin}");

    let again = train_inn(&cfg, &arch, &InnObjective::default(), &data).unwrap();
    assert_eq!(again.model, trained.model);
}

#[test]
fn saved_models_reload_bit_exactly() {
    let data = padded_identity(200, 2);
    let (mut cfg, arch) = setup();
    cfg.epochs = 2;
    let inn = train_inn(&cfg, &arch, &InnObjective::default(), &data).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("inn.json");
    save_model(&path, &SavedModel::Inn(inn.clone())).unwrap();
    let SavedModel::Inn(back) = load_model(&path).unwrap() else {
        panic!("wrong kind");
    };
    assert_eq!(back.permutations(), inn.permutations());
    let a = forward_mse(&inn, &data.x, &data.y, None).unwrap();
    let b = forward_mse(&back, &data.x, &data.y, None).unwrap();
    assert_eq!(a.mean.to_bits(), b.mean.to_bits());
    let gen_a = inn.generate(&data.y, None, 3).unwrap();
    let gen_b = back.generate(&data.y, None, 3).unwrap();
    assert_eq!(gen_a, gen_b);

    std::fs::write(&path, std::fs::read_to_string(&path).unwrap().replace("\"format_version\":1", "\"format_version\":9")).unwrap();
    assert!(load_model(&path).is_err());
}
