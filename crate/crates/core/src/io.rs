//! Little-endian helpers for the binary file formats.

use crate::scalar::Real;

pub(crate) struct LeReader<'a> {
    buf: &'a [u8],
}

impl<'a> LeReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.buf.len() < n {
            return Err(format!("truncated: wanted {n} bytes, {} left", self.buf.len()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32_vec<T: Real>(&mut self, n: usize) -> Result<Vec<T>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("length overflow")?)?;
        bytes
            .chunks_exact(4)
            .map(|c| {
                let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
                if v.is_finite() {
                    Ok(T::lit(v as f64))
                } else {
                    Err("non-finite value".to_string())
                }
            })
            .collect()
    }
}

#[derive(Default)]
pub(crate) struct LeWriter {
    pub(crate) buf: Vec<u8>,
}

impl LeWriter {
    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f32s<T: Real>(&mut self, values: &[T]) {
        for &v in values {
            self.buf.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
        }
    }
}
