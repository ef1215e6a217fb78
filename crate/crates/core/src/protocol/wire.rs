//! Payload layouts for each message tag. All integers little-endian.
//!
//! | tag              | payload                                                   |
//! |------------------|-----------------------------------------------------------|
//! | PubKeyRequest    | empty                                                     |
//! | PubKeySet        | n (u16) ‖ n × (peer u16 ‖ public key 32)                  |
//! | PubKeyForward    | n (u16) ‖ n × (origin u16 ‖ public key 32)                |
//! | EncryptedBatch   | secured: cluster (u16) ‖ n (u32) ‖ n × EncryptedIdBatch   |
//! |                  | plain: n (u32) ‖ n × id (u64)                             |
//! | WeightSlice      | cluster (u16) ‖ matrix                                    |
//! | Labels           | n (u32) ‖ n × label (u8)                                  |
//! | MaskedActivation | n (u32) ‖ n × word (u64 ring element or f64 in plain)     |
//! | Delta            | matrix                                                    |
//! | MaskedGradient   | n (u32) ‖ n × word                                        |
//! | GradientForward  | cluster (u16) ‖ n (u32) ‖ n × word                        |
//! | Prediction       | n (u32) ‖ n × probability (f64)                           |
//! | Ack              | loss (f64)                                                |
//!
//! `matrix` is `rows (u32) ‖ cols (u32) ‖ rows·cols × f64`, row-major.

use ndarray::Array2;

use crate::crypto::{EncryptedIdBatch, KEY_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Malformed;

#[derive(Default)]
pub struct Writer(Vec<u8>);

impl Writer {
    pub fn new() -> Self {
        Writer(Vec::new())
    }

    pub fn u8(mut self, v: u8) -> Self {
        self.0.push(v);
        self
    }

    pub fn u16(mut self, v: u16) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(mut self, v: u32) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(mut self, v: f64) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(mut self, b: &[u8]) -> Self {
        self.0.extend_from_slice(b);
        self
    }

    pub fn words(mut self, ws: impl ExactSizeIterator<Item = u64>) -> Self {
        self.0.extend_from_slice(&(ws.len() as u32).to_le_bytes());
        for w in ws {
            self.0.extend_from_slice(&w.to_le_bytes());
        }
        self
    }

    pub fn matrix(mut self, m: &Array2<f64>) -> Self {
        self = self.u32(m.nrows() as u32).u32(m.ncols() as u32);
        for v in m.iter() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.0
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], Malformed> {
        if self.buf.len() < n {
            return Err(Malformed);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8, Malformed> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, Malformed> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, Malformed> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, Malformed> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, Malformed> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn key(&mut self) -> Result<[u8; KEY_LEN], Malformed> {
        Ok(self.take(KEY_LEN)?.try_into().unwrap())
    }

    pub fn words(&mut self) -> Result<Vec<u64>, Malformed> {
        let n = self.u32()? as usize;
        let body = self.take(n.checked_mul(8).ok_or(Malformed)?)?;
        Ok(body.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn matrix(&mut self) -> Result<Array2<f64>, Malformed> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows.checked_mul(cols).ok_or(Malformed)?;
        let body = self.take(n.checked_mul(8).ok_or(Malformed)?)?;
        let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Array2::from_shape_vec((rows, cols), data).map_err(|_| Malformed)
    }

    pub fn encrypted_batch(&mut self) -> Result<EncryptedIdBatch, Malformed> {
        let (b, used) = EncryptedIdBatch::from_bytes(self.buf).ok_or(Malformed)?;
        self.buf = &self.buf[used..];
        Ok(b)
    }

    pub fn end(self) -> Result<(), Malformed> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Malformed)
        }
    }
}

pub fn f64_words(v: &[f64]) -> impl ExactSizeIterator<Item = u64> + '_ {
    v.iter().map(|x| x.to_bits())
}

pub fn words_f64(w: &[u64]) -> Vec<f64> {
    w.iter().map(|&b| f64::from_bits(b)).collect()
}

pub fn public_keys(entries: &[(u16, [u8; KEY_LEN])]) -> Vec<u8> {
    let mut w = Writer::new().u16(entries.len() as u16);
    for (peer, pk) in entries {
        w = w.u16(*peer).bytes(pk);
    }
    w.finish()
}

pub fn read_public_keys(payload: &[u8]) -> Result<Vec<(u16, [u8; KEY_LEN])>, Malformed> {
    let mut r = Reader::new(payload);
    let n = r.u16()?;
    let out = (0..n).map(|_| Ok((r.u16()?, r.key()?))).collect::<Result<Vec<_>, Malformed>>()?;
    r.end()?;
    Ok(out)
}

pub fn secured_batch(cluster: u16, entries: &[EncryptedIdBatch]) -> Vec<u8> {
    let mut w = Writer::new().u16(cluster).u32(entries.len() as u32);
    for e in entries {
        w = w.bytes(&e.to_bytes());
    }
    w.finish()
}

pub fn read_secured_batch(payload: &[u8]) -> Result<(u16, Vec<EncryptedIdBatch>), Malformed> {
    let mut r = Reader::new(payload);
    let cluster = r.u16()?;
    let n = r.u32()?;
    let entries = (0..n).map(|_| r.encrypted_batch()).collect::<Result<Vec<_>, _>>()?;
    r.end()?;
    Ok((cluster, entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{encrypt_sample_ids, pack_nonce};
    use ndarray::array;

    #[test]
    fn matrix_and_words_round_trip() {
        let m = array![[1.0, -2.5], [3.0, 0.0], [f64::MIN_POSITIVE, 7.0]];
        let payload = Writer::new().u16(3).matrix(&m).words([1u64, u64::MAX].into_iter()).finish();
        let mut r = Reader::new(&payload);
        assert_eq!(r.u16().unwrap(), 3);
        assert_eq!(r.matrix().unwrap(), m);
        assert_eq!(r.words().unwrap(), vec![1, u64::MAX]);
        r.end().unwrap();
        assert_eq!(payload.len(), 2 + 8 + 48 + 4 + 16);
    }

    #[test]
    fn truncated_payloads_are_rejected() {
        let payload = Writer::new().words([1u64, 2].into_iter()).finish();
        assert!(Reader::new(&payload[..payload.len() - 1]).words().is_err());
        assert!(Reader::new(&[]).u16().is_err());
        let extra = Writer::new().u8(1).u8(2).finish();
        let mut r = Reader::new(&extra);
        r.u8().unwrap();
        assert!(r.end().is_err());
    }

    #[test]
    fn keys_and_batches_round_trip() {
        let keys = vec![(1u16, [7u8; 32]), (4, [9u8; 32])];
        assert_eq!(read_public_keys(&public_keys(&keys)).unwrap(), keys);
        let entries: Vec<_> = (0..3)
            .map(|s| encrypt_sample_ids(&[1u8; 32], 2, &[s as u64], pack_nonce(0, 0, 2, s)))
            .collect();
        let (cluster, back) = read_secured_batch(&secured_batch(2, &entries)).unwrap();
        assert_eq!(cluster, 2);
        assert_eq!(back, entries);
    }
}
