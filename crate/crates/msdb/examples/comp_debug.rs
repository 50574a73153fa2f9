use msdb::model::*;
use msdb::ops::*;
use msdb::tensor::*;
use msdb::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn main() {
    let mut cfg = ModelConfig::default();
    cfg.input_size = (32, 32);
    cfg.stage_channels = vec![3, 4, 5, 5];
    cfg.stage_strides = vec![4, 8, 8, 8];
    cfg.crop_size = 8;
    cfg.pool_grids = vec![(1, 1), (2, 2), (4, 4)];
    cfg.fused_channels = 4;
    cfg.num_parse_classes = 7;
    cfg.bg_logit = 0.25;

    let mut rng = ChaCha8Rng::seed_from_u64(0xFACE);
    for trial in 0..5 {
        let params = ModelParams::<f64>::init(&cfg, rng.gen()).unwrap();
        let image = rand_tensor(&mut rng, &[1, 3, 32, 32], 0.0, 1.0);
        let boxes = {
            let g = Graph::new();
            let stages = backbone_forward(&g, &image, &params).unwrap();
            let seg = mask_branch_forward(&g, &stages[3], &params).unwrap();
            let posterior = softmax_channelwise(&g, &seg).unwrap();
            locate_hand(&posterior, cfg.loc_threshold, cfg.loc_margin).unwrap()
        };
        println!("trial {trial} boxes {:?}", boxes);
        let probe = rand_tensor(&mut rng, &[1, 7, 32, 32], -1.0, 1.0);
        let run = |g: &Graph<f64>| -> Tensor<f64> {
            let stages = backbone_forward(g, &image, &params).unwrap();
            let seg = mask_branch_forward(g, &stages[3], &params).unwrap();
            let posterior = softmax_channelwise(g, &seg).unwrap();
            let crop = parsing_branch_forward(g, &stages, Some(&posterior), &boxes, &params).unwrap();
            let full = reconstruct_full(g, &crop, &boxes, cfg.input_size, cfg.bg_logit).unwrap();
            sum_all(g, &mul(g, &full, &probe).unwrap()).unwrap()
        };
        let checked = if trial % 2 == 0 {
            params.parsing.as_ref().unwrap().stage_projs[0].weight.clone()
        } else {
            params.mask.as_ref().unwrap().convs.last().unwrap().weight.clone()
        };
        params.zero_all_grads();
        let g = Graph::new();
        let loss = run(&g);
        backward(&loss, &g).unwrap();
        let analytic = checked.grad().unwrap();
        params.zero_all_grads();
        let base = checked.to_vec();
        let eps = 1e-6;
        let mut worst = (0usize, 0.0f64, 0.0, 0.0);
        for i in 0..base.len() {
            checked.apply_update(|b| b[i] = base[i] + eps);
            let fp = run(&Graph::new()).item().as_f64();
            checked.apply_update(|b| b[i] = base[i] - eps);
            let fm = run(&Graph::new()).item().as_f64();
            checked.apply_update(|b| b[i] = base[i]);
            let numeric = (fp - fm) / (2.0 * eps);
            let rel = (analytic[i] - numeric).abs() / f64::max(1e-8, analytic[i].abs() + numeric.abs());
            if rel > worst.1 { worst = (i, rel, analytic[i], numeric); }
        }
        println!("  which={} worst coord {} rel {:.3e} analytic {:.6e} numeric {:.6e}", trial%2, worst.0, worst.1, worst.2, worst.3);
    }
}
