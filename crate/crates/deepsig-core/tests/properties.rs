//! Property-based checks: structural invariants of the payload protocol and
//! the pure math helpers, over randomized inputs rather than fixed vectors.

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deepsig_core::bits::{hamming, pack_bits, unpack_bits};
use deepsig_core::content::{binarize_indices, debinarize_indices};
use deepsig_core::eval::{fold_ber, wilson_ci};
use deepsig_core::payload::bch::{body_code, BCH_N, BODY_T_TABLE};
use deepsig_core::payload::capacity::capacity_bsc;
use deepsig_core::payload::grid::{
    build_metadata, compose_payload, parse_payload, GridConfig, ProtocolContext, Region,
    BAND_COLS, RESERVED_CELLS,
};
use deepsig_core::payload::keys::SIGNATURE_BITS;
use deepsig_core::payload::marker::{locate_marker, MARKER, MARKER_SIDE};
use deepsig_core::payload::metadata::{decode_metadata, encode_metadata, scaled_dim};
use deepsig_core::watermark::NoiseSpec;
use deepsig_core::Real;

fn default_ctx() -> ProtocolContext {
    ProtocolContext { spatial_down: 16, bits_per_index: 8 }
}

fn latent_dims(h: usize, w: usize, q: usize, ctx: &ProtocolContext) -> (usize, usize) {
    (
        scaled_dim(h, q).div_ceil(ctx.spatial_down),
        scaled_dim(w, q).div_ceil(ctx.spatial_down),
    )
}

fn random_bits(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.gen_range(0..2u8)).collect()
}

fn distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

proptest! {
    #[test]
    fn pack_unpack_round_trip(seed in any::<u64>(), n in 0usize..2048) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits = random_bits(&mut rng, n);
        prop_assert_eq!(unpack_bits(&pack_bits(&bits), n), bits);
    }

    #[test]
    fn binarize_is_a_bijection(
        seed in any::<u64>(),
        h in 1usize..=20,
        w in 1usize..=20,
        k_log in 1u32..=10,
    ) {
        let k = 1usize << k_log;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z_i = Array2::from_shape_fn((h, w), |_| rng.gen_range(0..k) as u16);
        let bits = binarize_indices(z_i.view(), k);
        prop_assert_eq!(bits.len(), h * w * k_log as usize);
        let back = debinarize_indices(&bits, h, w, k).unwrap();
        prop_assert_eq!(back, z_i);
    }

    #[test]
    fn capacity_monotone_and_bounded(
        m in 1usize..100_000,
        h in 1usize..2000,
        w in 1usize..2000,
        p1 in 0.0f64..=0.5,
        p2 in 0.0f64..=0.5,
    ) {
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        let c_lo = capacity_bsc(m, h, w, lo);
        let c_hi = capacity_bsc(m, h, w, hi);
        prop_assert!(c_hi <= c_lo);
        prop_assert!(c_lo <= m as f64 / (h * w) as f64 + 1e-12);
        prop_assert!(c_hi >= 0.0);
    }

    #[test]
    fn bch_corrects_up_to_t(
        seed in any::<u64>(),
        t_idx in 0usize..5,
        extra in 0usize..=24,
    ) {
        let t = BODY_T_TABLE[t_idx];
        let flips = extra.min(t);
        let code = body_code(t);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let msg = random_bits(&mut rng, code.k());
        let mut cw = code.encode(&msg);
        prop_assert_eq!(cw.len(), BCH_N);
        for &pos in &distinct(&mut rng, BCH_N, flips) {
            cw[pos] ^= 1;
        }
        let (dec, fixed) = code.decode(&cw).expect("within designed distance");
        prop_assert_eq!(dec, msg);
        prop_assert_eq!(fixed, flips);
    }

    #[test]
    fn metadata_survives_designed_flips(
        seed in any::<u64>(),
        h in 233usize..1200,
        w in 233usize..1200,
        q in 4usize..=16,
        flips in 0usize..=23,
    ) {
        let cfg = GridConfig { scale_q: q, ..GridConfig::default() };
        let ctx = default_ctx();
        let lat = latent_dims(h, w, q, &ctx);
        let len = lat.0 * lat.1 * ctx.bits_per_index + SIGNATURE_BITS;
        let Ok(meta) = build_metadata((h, w), lat, len, &cfg, &ctx) else {
            return Ok(()); // dims the capacity rejects are out of scope here
        };
        prop_assert_eq!(meta.original_dims(), (h, w));
        prop_assert_eq!(meta.scaled_dims(), (scaled_dim(h, q), scaled_dim(w, q)));
        let mut coded = encode_metadata(&meta).unwrap();
        prop_assert_eq!(coded.len(), BCH_N);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &pos in &distinct(&mut rng, BCH_N, flips) {
            coded[pos] ^= 1;
        }
        let back = decode_metadata(&coded).expect("within designed distance");
        prop_assert_eq!(back, meta);
    }

    #[test]
    fn marker_is_found_where_planted(
        seed in any::<u64>(),
        gh in 20usize..80,
        gw in 20usize..80,
        my_frac in 0.0f64..1.0,
        mx_frac in 0.0f64..1.0,
    ) {
        let my = ((gh - MARKER_SIDE) as f64 * my_frac) as usize;
        let mx = ((gw - MARKER_SIDE) as f64 * mx_frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = Array2::from_shape_fn((gh, gw), |_| rng.gen_range(0..2u8));
        for dy in 0..MARKER_SIDE {
            for dx in 0..MARKER_SIDE {
                grid[[my + dy, mx + dx]] = MARKER[dy][dx];
            }
        }
        let soft = grid.mapv(Real::from);
        let (fy, fx, score) = locate_marker(soft.view()).expect("planted marker");
        prop_assert_eq!((fy, fx), (my, mx));
        prop_assert!(score.abs() > 0.99);
    }

    #[test]
    fn wilson_interval_brackets_the_rate(trials in 1usize..10_000, frac in 0.0f64..=1.0) {
        let successes = ((trials as f64) * frac) as usize;
        let (p, lo, hi) = wilson_ci(successes, trials);
        prop_assert!((0.0..=1.0).contains(&lo));
        prop_assert!((0.0..=1.0).contains(&hi));
        prop_assert!(lo <= p && p <= hi);
    }

    #[test]
    fn fold_ber_reflects(raw in 0.0f64..=1.0) {
        let f = fold_ber(raw);
        prop_assert!((0.0..=0.5).contains(&f));
        prop_assert!((f - fold_ber(1.0 - raw)).abs() < 1e-12);
    }

    #[test]
    fn hamming_is_a_metric(seed in any::<u64>(), n in 1usize..256) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_bits(&mut rng, n);
        let b = random_bits(&mut rng, n);
        let c = random_bits(&mut rng, n);
        prop_assert_eq!(hamming(&a, &a), 0);
        prop_assert_eq!(hamming(&a, &b), hamming(&b, &a));
        prop_assert!(hamming(&a, &c) <= hamming(&a, &b) + hamming(&b, &c));
    }

    #[test]
    fn scaled_dim_is_monotone(n1 in 1usize..4096, n2 in 1usize..4096, q in 1usize..=16) {
        let (lo, hi) = if n1 <= n2 { (n1, n2) } else { (n2, n1) };
        prop_assert!(scaled_dim(lo, q) <= scaled_dim(hi, q));
        prop_assert_eq!(scaled_dim(lo, 16), lo);
    }

    #[test]
    fn noise_spec_text_round_trip(
        kind_idx in 0usize..5,
        strength_pct in 0u32..=100,
    ) {
        let (kind, strength) = match kind_idx {
            0 => ("jpeg_real", 10.0 + 90.0 * strength_pct as f64 / 100.0),
            1 => ("contrast", 3.0 * strength_pct as f64 / 100.0),
            2 => ("saturation", 2.0 * strength_pct as f64 / 100.0),
            3 => ("crop", 0.05 + 0.9 * strength_pct as f64 / 100.0),
            _ => ("identity", 0.0),
        };
        let text = if kind == "identity" {
            kind.to_string()
        } else {
            format!("{kind}:{strength}")
        };
        let spec: NoiseSpec = text.parse().expect("valid spec");
        prop_assert_eq!(spec.to_string().parse::<NoiseSpec>().unwrap(), spec);
        prop_assert_eq!(spec.to_string(), text);
    }
}

// Compose/parse over random dimensions is the expensive property; fewer
// cases keep the suite responsive without losing the shape of the space.
proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn compose_parse_round_trip(
        seed in any::<u64>(),
        h in 233usize..420,
        w in 233usize..420,
    ) {
        let cfg = GridConfig::default();
        let ctx = default_ctx();
        let lat = latent_dims(h, w, cfg.scale_q, &ctx);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_b = random_bits(&mut rng, lat.0 * lat.1 * ctx.bits_per_index + SIGNATURE_BITS);
        let grid = compose_payload(&w_b, (h, w), lat, &cfg, &ctx, &mut rng).unwrap();
        prop_assert_eq!(grid.bits.dim(), (h.div_ceil(cfg.stride), w.div_ceil(cfg.stride)));
        let parsed = parse_payload::<Real>(grid.to_soft::<Real>().view(), &ctx).unwrap();
        prop_assert_eq!(parsed.w_b(), w_b);
        prop_assert_eq!(parsed.corrected, 0);
        prop_assert_eq!(parsed.marker_pos, (cfg.border, cfg.border));
        prop_assert_eq!(parsed.meta.original_dims(), (h, w));
    }

    #[test]
    fn regions_partition_the_grid(
        seed in any::<u64>(),
        h in 233usize..420,
        w in 233usize..420,
    ) {
        let cfg = GridConfig::default();
        let ctx = default_ctx();
        let lat = latent_dims(h, w, cfg.scale_q, &ctx);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_b = random_bits(&mut rng, lat.0 * lat.1 * ctx.bits_per_index + SIGNATURE_BITS);
        let grid = compose_payload(&w_b, (h, w), lat, &cfg, &ctx, &mut rng).unwrap();
        let map = grid.region_map();
        let count = |r: Region| map.iter().filter(|&&m| m == r).count();
        prop_assert_eq!(count(Region::Marker), MARKER_SIDE * MARKER_SIDE);
        prop_assert_eq!(
            count(Region::Marker) + count(Region::Meta),
            RESERVED_CELLS
        );
        prop_assert_eq!(count(Region::Body), grid.meta.coded_body_len);
        let (ch, cw) = map.dim();
        let border = grid.meta.border;
        prop_assert_eq!(
            count(Region::Border),
            ch * cw - (ch - 2 * border) * (cw - 2 * border)
        );
        // The marker sits flush in the interior's top-left corner and the
        // metadata block fills the rest of the band beside it.
        prop_assert_eq!(map[[border, border]], Region::Marker);
        prop_assert_eq!(map[[border, border + MARKER_SIDE]], Region::Meta);
        prop_assert_eq!(map[[border, border + BAND_COLS]], Region::Body);
        prop_assert_eq!(map[[0, 0]], Region::Border);
    }
}
