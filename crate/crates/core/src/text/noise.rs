use rand::Rng;

use crate::text::corpus::Sentence;

/// Word dropout followed by a bounded local shuffle.
///
/// Each token survives with probability `1 - p_drop`; when every token would
/// be dropped one of them, chosen uniformly, is kept. Survivors are sorted by
/// `i + u_i` with `u_i ~ U[0, window + 1)`, which displaces no token by more
/// than `window` positions.
pub fn apply_noise(s: &Sentence, p_drop: f64, window: usize, rng: &mut impl Rng) -> Sentence {
    let ids = s.ids();
    let mut kept: Vec<usize> = if p_drop > 0.0 {
        ids.iter().copied().filter(|_| rng.gen::<f64>() >= p_drop).collect()
    } else {
        ids.to_vec()
    };
    if kept.is_empty() {
        kept.push(ids[rng.gen_range(0..ids.len())]);
    }
    if window > 0 && kept.len() > 1 {
        let mut keyed: Vec<(f64, usize)> = kept
            .iter()
            .enumerate()
            .map(|(i, &t)| (i as f64 + rng.gen::<f64>() * (window + 1) as f64, t))
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        kept = keyed.into_iter().map(|(_, t)| t).collect();
    }
    Sentence::new(kept).expect("noise keeps at least one input token")
}
