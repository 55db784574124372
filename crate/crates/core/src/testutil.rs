use crate::scalar::Real;

/// FNV-1a over the f32 bit patterns, so goldens tolerate sub-f32 noise.
pub(crate) fn grid_digest<T: Real>(values: &[T]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_f32_lossy().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}
