//! Counter-based normal draws keyed by `(seed, control, path, step)`.
//!
//! Every draw is a pure function of its key, so simulations are bit-identical
//! across thread counts and path blocks can be generated in any order. The
//! mixer chains the splitmix64 finalizer over the key words; the normal
//! variate comes from one Box-Muller evaluation on two decorrelated uniforms.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const STREAM_A: u64 = 0xd1b5_4a32_d192_ed03;
const STREAM_B: u64 = 0xaef1_7502_b3de_9cd7;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn key(seed: u64, control: u64, path: u64, step: u64) -> u64 {
    let mut h = mix64(seed ^ GOLDEN);
    h = mix64(h ^ control.wrapping_mul(STREAM_A).wrapping_add(GOLDEN));
    h = mix64(h ^ path.wrapping_mul(STREAM_B).wrapping_add(GOLDEN));
    mix64(h ^ step.wrapping_mul(GOLDEN).wrapping_add(1))
}

/// Uniform in the open interval (0, 1).
#[inline]
fn to_unit(z: u64) -> f64 {
    ((z >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// Standard normal draw for one `(seed, control, path, step)` key.
#[inline]
pub fn standard_normal(seed: u64, control: u64, path: u64, step: u64) -> f64 {
    let k = key(seed, control, path, step);
    let u1 = to_unit(mix64(k ^ STREAM_A));
    let u2 = to_unit(mix64(k.wrapping_add(GOLDEN)));
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
