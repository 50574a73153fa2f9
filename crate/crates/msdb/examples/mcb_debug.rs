use msdb::label::LabelMap;
use msdb::losses::*;
use msdb::ops::*;
use msdb::tensor::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x10C1);
    for trial in 0..5 {
        let (n, c, h, w) = (2usize, rng.gen_range(2..4usize), 4usize, 4usize);
        let count = n * c * h * w;
        let logits: Vec<f32> = (0..count).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let x = Tensor::<f32>::new(&[n, c, h, w], logits).unwrap();
        let per_image: Vec<(OneHotLabels, ClassRatioVector)> = (0..n)
            .map(|_| {
                let ids: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..c as u8)).collect();
                let map = LabelMap::new(h, w, ids).unwrap();
                (OneHotLabels::from_label_map(&map, c).unwrap(), class_ratios(&map, c).unwrap())
            })
            .collect();
        let cfg = LossConfig::default();
        let f = |t: &Tensor<f32>, g: &Graph<f32>| -> Tensor<f32> {
            let probs = softmax_channelwise(g, t).unwrap();
            let flat = flatten_pixels(g, &probs).unwrap();
            let mut total: Option<Tensor<f32>> = None;
            for (i, (labels, ratios)) in per_image.iter().enumerate() {
                let rows = slice_rows(g, &flat, i * h * w, h * w).unwrap();
                let li = mcb_focal_loss(g, &rows, labels, ratios, &cfg).unwrap();
                total = Some(match total { None => li, Some(tt) => add(g, &tt, &li).unwrap() });
            }
            scale(g, &total.unwrap(), 0.5).unwrap()
        };
        let probe = x.param_copy();
        let g = Graph::new();
        let loss = f(&probe, &g);
        backward(&loss, &g).unwrap();
        let analytic = probe.grad().unwrap();
        let base = x.to_vec();
        let eps = 1e-3f32;
        let (mut worst, mut wa, mut wn) = (0.0f64, 0.0f64, 0.0f64);
        let gmax = analytic.iter().map(|v| v.abs()).fold(0.0f32, f32::max);
        for i in 0..base.len() {
            let mut plus = base.clone(); plus[i] += eps;
            let mut minus = base.clone(); minus[i] -= eps;
            let fp = f(&Tensor::new(x.shape(), plus).unwrap(), &Graph::new()).item() as f64;
            let fm = f(&Tensor::new(x.shape(), minus).unwrap(), &Graph::new()).item() as f64;
            let nmr = (fp - fm) / (2.0 * eps as f64);
            let a = analytic[i] as f64;
            let rel = (a - nmr).abs() / f64::max(1e-8, a.abs() + nmr.abs());
            if rel > worst { worst = rel; wa = a; wn = nmr; }
        }
        println!("trial {trial}: worst rel {worst:.3e}  analytic {wa:.3e} numeric {wn:.3e}  gmax {gmax:.3e}");
    }
}
