//! Binary chain files. All integers are `u64` and all floats `f64`, both
//! little-endian:
//!
//! ```text
//! magic     8 bytes  "MSFACHN1"
//! p, k_star, n_studies
//! j_star[s]          for each study
//! n_per_study[s]     for each study
//! n_draws
//! per draw: Φ (P × k_star, row-major), then Λ_s (P × j_star[s], row-major)
//!           for each study, then ψ_s (P) for each study
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use msfa::sampler::{ChainDraws, Draw};
use nalgebra::{DMatrix, DVector};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"MSFACHN1";

fn put_u64<W: Write>(w: &mut W, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u64).to_le_bytes())
}

fn put_matrix<W: Write>(w: &mut W, m: &DMatrix<f64>) -> std::io::Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn encode<W: Write>(w: &mut W, chain: &ChainDraws) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    put_u64(w, chain.p)?;
    put_u64(w, chain.k_star)?;
    put_u64(w, chain.n_studies())?;
    for &j in &chain.j_star {
        put_u64(w, j)?;
    }
    for &n in &chain.n_per_study {
        put_u64(w, n)?;
    }
    put_u64(w, chain.len())?;
    for d in &chain.draws {
        put_matrix(w, &d.phi)?;
        for l in &d.lambdas {
            put_matrix(w, l)?;
        }
        for psi in &d.psis {
            for v in psi.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn write_chain(path: &Path, chain: &ChainDraws) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode(&mut w, chain).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

struct Decoder<R> {
    r: R,
}

impl<R: Read> Decoder<R> {
    fn bytes8(&mut self) -> std::io::Result<[u8; 8]> {
        let mut b = [0u8; 8];
        self.r.read_exact(&mut b)?;
        Ok(b)
    }

    fn usize(&mut self) -> std::io::Result<usize> {
        Ok(u64::from_le_bytes(self.bytes8()?) as usize)
    }

    fn f64(&mut self) -> std::io::Result<f64> {
        Ok(f64::from_le_bytes(self.bytes8()?))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> std::io::Result<DMatrix<f64>> {
        let mut v = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            v.push(self.f64()?);
        }
        Ok(DMatrix::from_row_slice(rows, cols, &v))
    }
}

pub fn decode<R: Read>(r: R) -> std::io::Result<ChainDraws> {
    let bad = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_owned());
    let mut d = Decoder { r };
    if &d.bytes8()? != MAGIC {
        return Err(bad("not a chain file (bad magic)"));
    }
    let p = d.usize()?;
    let k = d.usize()?;
    let s = d.usize()?;
    let j_star = (0..s).map(|_| d.usize()).collect::<std::io::Result<Vec<_>>>()?;
    let n_per_study = (0..s).map(|_| d.usize()).collect::<std::io::Result<Vec<_>>>()?;
    let n_draws = d.usize()?;
    let mut chain = ChainDraws::new(p, k, j_star.clone(), n_per_study);
    for _ in 0..n_draws {
        let phi = d.matrix(p, k)?;
        let lambdas = j_star.iter().map(|&j| d.matrix(p, j)).collect::<std::io::Result<Vec<_>>>()?;
        let psis = (0..s)
            .map(|_| (0..p).map(|_| d.f64()).collect::<std::io::Result<Vec<_>>>().map(DVector::from_vec))
            .collect::<std::io::Result<Vec<_>>>()?;
        chain.draws.push(Draw { phi, lambdas, psis, scores: None });
    }
    let mut rest = [0u8; 1];
    if d.r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after the last draw"));
    }
    Ok(chain)
}

pub fn read_chain(path: &Path) -> Result<ChainDraws> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    decode(BufReader::new(file)).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_chain() -> ChainDraws {
        let mut c = ChainDraws::new(3, 2, vec![1, 0], vec![5, 7]);
        for r in 0..4 {
            let f = r as f64;
            c.draws.push(Draw {
                phi: DMatrix::from_fn(3, 2, |i, j| f + i as f64 * 0.1 - j as f64 / 3.0),
                lambdas: vec![DMatrix::from_fn(3, 1, |i, _| -f * i as f64), DMatrix::zeros(3, 0)],
                psis: vec![DVector::from_element(3, 0.5 + f), DVector::from_element(3, 1e-7)],
                scores: None,
            });
        }
        c
    }

    #[test]
    fn round_trip() {
        let chain = sample_chain();
        let mut buf = Vec::new();
        encode(&mut buf, &chain).unwrap();
        assert_eq!(buf.len(), 8 * (1 + 3 + 2 + 2 + 1) + 8 * 4 * (6 + 3 + 6));
        assert_eq!(decode(buf.as_slice()).unwrap(), chain);
    }

    #[test]
    fn header_layout_is_little_endian_row_major() {
        let chain = sample_chain();
        let mut buf = Vec::new();
        encode(&mut buf, &chain).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 3);
        let first = 8 * 9;
        let second = f64::from_le_bytes(buf[first + 8..first + 16].try_into().unwrap());
        assert_eq!(second, chain.draws[0].phi[(0, 1)]);
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let mut buf = Vec::new();
        encode(&mut buf, &sample_chain()).unwrap();
        assert!(decode(&buf[..buf.len() - 3]).is_err());
        buf[0] = b'X';
        assert!(decode(buf.as_slice()).is_err());
    }
}
