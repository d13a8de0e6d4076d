//! Randomized invariants.

use flowdistill::afwm::FlowCascade;
use flowdistill::checkpoint::Checkpoint;
use flowdistill::config::KvConfig;
use flowdistill::image_io::{decode_ppm, encode_ppm, Image};
use flowdistill::losses::{gate_psi, second_order_smooth, CHARBONNIER_ALPHA, CHARBONNIER_EPS};
use flowdistill::synth::{synth_sample, SynthConfig};
use flowdistill::{FlowField, Tensor};
use proptest::prelude::*;

fn charbonnier(x: f64) -> f64 {
    (x * x + CHARBONNIER_EPS * CHARBONNIER_EPS).powf(CHARBONNIER_ALPHA)
}

/// Flow `a + b*x + c*y` per channel in pixel units, expressed in normalized
/// offsets on an `h x w` grid.
fn affine_flow(coef: &[f64; 6], h: usize, w: usize) -> FlowField<f64> {
    let mut v = vec![0.0; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            v[y * w + x] = (coef[0] + coef[1] * xf + coef[2] * yf) * 2.0 / (w - 1) as f64;
            v[h * w + y * w + x] = (coef[3] + coef[4] * xf + coef[5] * yf) * 2.0 / (h - 1) as f64;
        }
    }
    FlowField::new(Tensor::new(&[1, 2, h, w], v).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn affine_flows_sit_at_the_smoothness_floor(
        coef in prop::array::uniform6(-2.0f64..2.0),
        levels in 1usize..=3,
        h in 3usize..6,
        w in 3usize..6,
    ) {
        let flows = (0..levels).map(|l| affine_flow(&coef, h << l, w << l)).collect();
        let value = second_order_smooth(&FlowCascade { flows }).unwrap().item();
        let floor = levels as f64 * charbonnier(0.0);
        prop_assert!((value - floor).abs() <= 1e-9 * floor, "{value} vs {floor}");
    }

    #[test]
    fn gate_is_the_strict_l1_comparison(
        n in 1usize..5,
        seed in any::<u64>(),
        tie in any::<bool>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let len = n * 3 * 4 * 4;
        let mut gen = || (0..len).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (real, tutor) = (gen(), gen());
        let student = if tie { tutor.clone() } else { gen() };
        let t = |v: &Vec<f64>| Tensor::new(&[n, 3, 4, 4], v.clone()).unwrap();
        let gate = gate_psi(&t(&tutor), &t(&student), &t(&real)).unwrap();
        let per = len / n;
        for b in 0..n {
            let err = |x: &[f64]| {
                x[b * per..(b + 1) * per].iter().zip(&real[b * per..(b + 1) * per])
                    .map(|(a, c)| (a - c).abs()).sum::<f64>() / per as f64
            };
            let (eu, es) = (err(&tutor), err(&student));
            prop_assert_eq!(gate.psi[b], eu < es);
            prop_assert!((gate.tutor_error[b] - eu).abs() < 1e-12);
            prop_assert!((gate.student_error[b] - es).abs() < 1e-12);
        }
        if tie {
            prop_assert_eq!(gate.active(), 0);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        bits in prop::collection::vec(any::<u32>(), 1..40),
        split in 0usize..40,
        role in "[a-z]{1,8}",
        value in "[ -~]{0,12}",
    ) {
        let values: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
        let cut = split.min(values.len() - 1) + 1;
        let mut params = vec![("a".to_string(), vec![cut], values[..cut].to_vec())];
        if cut < values.len() {
            params.push(("b.c".into(), vec![1, values.len() - cut], values[cut..].to_vec()));
        }
        let ck = Checkpoint { role, config: [("k".to_string(), value)].into(), params };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(&back.role, &ck.role);
        prop_assert_eq!(&back.config, &ck.config);
        for ((na, sa, va), (nb, sb, vb)) in ck.params.iter().zip(&back.params) {
            prop_assert_eq!((na, sa), (nb, sb));
            let a: Vec<u32> = va.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = vb.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn ppm_round_trip(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rgb: Vec<u8> = (0..h * w * 3).map(|_| r.gen()).collect();
        let image = Image::from_rgb8(h, w, &rgb).unwrap();
        let back = decode_ppm(&encode_ppm(&image).unwrap()).unwrap();
        prop_assert_eq!(back.to_rgb8().unwrap(), rgb);
    }

    #[test]
    fn warp_stays_within_source_range(
        h in 2usize..7,
        w in 2usize..7,
        src in prop::collection::vec(-5.0f64..5.0, 36),
        flow in prop::collection::vec(-3.0f64..3.0, 72),
    ) {
        let src = &src[..h * w];
        let out = Tensor::new(&[1, 1, h, w], src.to_vec()).unwrap()
            .grid_sample(&FlowField::new(Tensor::new(&[1, 2, h, w], flow[..2 * h * w].to_vec()).unwrap()).unwrap())
            .unwrap();
        let lo = src.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in out.to_vec() {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn config_text_round_trip(
        pairs in prop::collection::btree_map("[a-z_]{1,10}", "[a-zA-Z0-9.+-]{1,10}", 0..8),
    ) {
        let cfg = KvConfig::from_pairs(pairs.clone());
        let back = KvConfig::parse(&cfg.to_text()).unwrap();
        let got: Vec<(String, String)> = back.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let want: Vec<(String, String)> = pairs.into_iter().collect();
        prop_assert_eq!(got, want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generator_is_deterministic(seed in any::<u64>(), corruption in 0.0f64..1.0) {
        let cfg = SynthConfig { height: 32, width: 24, corruption };
        let a = synth_sample(seed, &cfg).unwrap();
        let b = synth_sample(seed, &cfg).unwrap();
        prop_assert_eq!(&a.person.data, &b.person.data);
        prop_assert_eq!(&a.clothes.data, &b.clothes.data);
        prop_assert_eq!(&a.representation.data, &b.representation.data);
        prop_assert_eq!(&a.alt_person.data, &b.alt_person.data);
        prop_assert_eq!(a.corrupted, b.corrupted);
    }
}
