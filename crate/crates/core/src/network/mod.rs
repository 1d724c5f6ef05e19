//! The full encoder/decoder network: configuration, parameter storage,
//! assembly, forward pass and analytic complexity.
//!
//! Five encoder stages (DDC + BIS, 2x max-pool between stages) feed both the
//! decoder skips and a multi-scale aggregation branch. The aggregated map is
//! projected and resized to each of the first four stages and merged with the
//! encoder feature by a coupling gate. Four decoder stages upsample, concatenate
//! the skip and apply DDC + BIS; a 1x1 conv and sigmoid produce the mask.

mod complexity;
mod config;
mod model;
mod weights;

pub use complexity::{model_complexity, model_complexity_at};
pub use config::ModelConfig;
pub use model::{build_model, load_model, load_weights, predict_mask, save_weights, Init, Model, Profile, Skip, Stage, BN_EPS};
pub use weights::{Param, WeightStore, FORMAT_VERSION, MAGIC};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_in;

    fn image(n: usize, side: usize, seed: u64) -> crate::Tensor {
        random_in([n, 3, side, side], seed, 0.0, 1.0)
    }

    #[test]
    fn stored_count_matches_analytic_total() {
        let mut configs = vec![ModelConfig::small(), ModelConfig::default()];
        let mut c = ModelConfig::small();
        c.stage_channels = [16, 16, 32, 32, 64];
        c.experts_per_stage = [1, 2, 3, 4, 5];
        c.decoder_experts = [3, 1, 2, 1];
        configs.push(c);
        for flags in 0..5 {
            let mut c = ModelConfig::small();
            match flags {
                0 => c.disable_bis = true,
                1 => c.disable_ass = true,
                2 => c.disable_psr = true,
                3 => c.disable_aacg = true,
                _ => c.disable_mia = true,
            }
            configs.push(c);
        }
        for cfg in configs {
            let model = build_model(&cfg).unwrap();
            assert_eq!(model.num_params(), model_complexity(&cfg).unwrap().total_params(), "{cfg:?}");
        }
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let a = build_model(&ModelConfig::small().with_seed(5)).unwrap();
        let b = build_model(&ModelConfig::small().with_seed(5)).unwrap();
        let c = build_model(&ModelConfig::small().with_seed(6)).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert_ne!(a.weights(), c.weights());
    }

    #[test]
    fn small_forward_contract() {
        let model = build_model(&ModelConfig::small()).unwrap();
        let x = image(2, 64, 1);
        let y = model.forward(&x).unwrap();
        assert_eq!(y.shape(), [2, 1, 64, 64]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(model.forward(&x).unwrap(), y);

        let singles: Vec<_> = (0..2).map(|n| model.forward(&x.sample_tensor(n)).unwrap()).collect();
        assert!(crate::Tensor::stack(&singles).unwrap().max_abs_diff(&y).unwrap() < 1e-5);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let model = build_model(&ModelConfig::small()).unwrap();
        assert!(model.forward(&image(1, 48, 2)).is_err());
        assert!(model.forward(&random_in([1, 1, 64, 64], 3, 0.0, 1.0)).is_err());
        assert!(model.forward(&random_in([1, 3, 64, 64], 4, 0.0, 1.5)).is_err());
    }

    #[test]
    fn ablated_models_run() {
        for flag in 0..5 {
            let mut cfg = ModelConfig::small();
            match flag {
                0 => cfg.disable_bis = true,
                1 => cfg.disable_ass = true,
                2 => cfg.disable_psr = true,
                3 => cfg.disable_aacg = true,
                _ => cfg.disable_mia = true,
            }
            let y = build_model(&cfg).unwrap().forward(&image(1, 32, 7)).unwrap();
            assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn load_rejects_wrong_params() {
        let cfg = ModelConfig::small();
        let store = build_model(&cfg).unwrap().into_weights();

        let mut missing = store.clone();
        missing.remove("dec2.bis.fuse.pw.bias");
        let err = Model::from_weights(&cfg, missing).unwrap_err().to_string();
        assert!(err.contains("dec2.bis.fuse.pw.bias"), "{err}");

        let mut extra = store.clone();
        extra.insert("stray.weight", Param::new(vec![1], vec![0.0]).unwrap()).unwrap();
        assert!(Model::from_weights(&cfg, extra).unwrap_err().to_string().contains("stray.weight"));

        let mut reshaped = store.clone();
        let p = reshaped.get_mut("enc3.ddc.first.kernels").unwrap();
        p.shape = vec![p.data.len()];
        let err = Model::from_weights(&cfg, reshaped).unwrap_err().to_string();
        assert!(err.contains("enc3.ddc.first.kernels"), "{err}");
    }

    #[test]
    fn predict_mask_cases() {
        let p = crate::Tensor::from_vec([1, 1, 1, 2], vec![0.4, 0.6]).unwrap();
        assert_eq!(predict_mask(&p, 0.5).data(), &[0.0, 1.0]);
        assert!(predict_mask(&p, 0.0).data().iter().all(|&v| v == 1.0));
        let m = predict_mask(&p, 0.5);
        assert_eq!(predict_mask(&m, 0.5), m);
    }
}
