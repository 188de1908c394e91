//! Little-endian binary files: float weights (`FCNW`), quantized weights (`FCNQ`) and iris
//! codes (`IRCD`). Layouts are listed in `docs/formats.md`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::codec::IrisCode;
use crate::error::{Error, Result};
use crate::fcn::{build_arch, ArchSpec, LayerKind, LayerSpec, Network};
use crate::quant::{DfpParams, LayerDfp, QuantLayer, QuantizedNetwork};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const FCNW_MAGIC: &[u8; 4] = b"FCNW";
pub const FCNQ_MAGIC: &[u8; 4] = b"FCNQ";
pub const IRCD_MAGIC: &[u8; 4] = b"IRCD";
pub const VERSION: u32 = 1;

/// Guards allocations driven by untrusted length fields.
const MAX_ELEMENTS: usize = 1 << 28;

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => fmt_err("file is truncated"),
            _ => Error::Io(e),
        })?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.bytes()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > MAX_ELEMENTS {
            return Err(fmt_err(format!("length field {n} is implausibly large")));
        }
        Ok(n)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        let mut b = vec![0u8; n];
        self.inner.read_exact(&mut b).map_err(|_| fmt_err("file is truncated"))?;
        String::from_utf8(b).map_err(|_| fmt_err("string is not UTF-8"))
    }

    fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.bytes::<4>()?;
        if &m != magic {
            return Err(fmt_err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(fmt_err(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn end(mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(fmt_err("trailing bytes after the last block")),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_i32(out: &mut Vec<u8>, v: i32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_header(out: &mut Vec<u8>, magic: &[u8; 4], arch: Option<&ArchSpec>, layers: usize) {
    out.extend_from_slice(magic);
    put_u32(out, VERSION);
    put_str(out, &arch.map(|a| a.arch_string()).unwrap_or_default());
    put_u32(out, arch.map_or(0, |a| a.n_channels as u32));
    out.extend_from_slice(&(arch.map_or(1.0, |a| a.scale) as f32).to_le_bytes());
    put_u32(out, layers as u32);
}

fn put_layer(out: &mut Vec<u8>, l: &LayerSpec) {
    out.push(l.kind.code());
    for v in [l.filter, l.stride, l.padding, l.in_channels, l.out_channels] {
        put_u32(out, v as u32);
    }
    out.push(l.group);
    out.push(u8::from(l.relu));
    put_i32(out, l.skip_from.map_or(-1, |s| s as i32));
}

fn read_header<R: Read>(r: &mut Reader<R>, magic: &[u8; 4]) -> Result<(Option<ArchSpec>, usize)> {
    r.expect_magic(magic)?;
    let groups = r.string()?;
    let n = r.u32()? as usize;
    let scale = r.f32()? as f64;
    let count = r.len()?;
    let arch = if groups.is_empty() {
        None
    } else {
        Some(ArchSpec::parse(scale, n, &groups).map_err(|e| fmt_err(format!("stored architecture: {e}")))?)
    };
    Ok((arch, count))
}

fn read_layer<R: Read>(r: &mut Reader<R>) -> Result<LayerSpec> {
    let kind = LayerKind::from_code(r.u8()?).map_err(|e| fmt_err(e.to_string()))?;
    let mut v = [0usize; 5];
    for x in &mut v {
        *x = r.u32()? as usize;
    }
    let group = r.u8()?;
    let relu = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(fmt_err(format!("relu flag {b}"))),
    };
    let skip = r.i32()?;
    let skip_from = match skip {
        -1 => None,
        s if s >= 0 => Some(s as usize),
        s => return Err(fmt_err(format!("skip index {s}"))),
    };
    Ok(LayerSpec {
        kind,
        filter: v[0],
        stride: v[1],
        padding: v[2],
        in_channels: v[3],
        out_channels: v[4],
        group,
        relu,
        skip_from,
    })
}

/// Rebuilds the layer list, checking it against the stored architecture when there is one.
fn check_layers(arch: &Option<ArchSpec>, layers: Vec<LayerSpec>) -> Result<Network<f32>> {
    match arch {
        Some(a) => {
            let net: Network<f32> = build_arch(a)?;
            if net.layers() != layers.as_slice() {
                return Err(fmt_err("layer records do not match the stored architecture"));
            }
            Ok(net)
        }
        None => Network::from_layers(layers).map_err(|e| fmt_err(e.to_string())),
    }
}

fn read_dims<R: Read>(r: &mut Reader<R>, l: &LayerSpec) -> Result<(usize, usize)> {
    let (rows, cols) = (r.len()?, r.len()?);
    if (rows, cols) != l.weight_shape() {
        return Err(fmt_err(format!("weight block {rows}x{cols} does not match the layer")));
    }
    Ok((rows, cols))
}

pub fn fcnw_bytes<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let mut out = Vec::new();
    put_header(&mut out, FCNW_MAGIC, net.arch(), net.layers().len());
    for (l, p) in net.layers().iter().zip(net.params()) {
        put_layer(&mut out, l);
        put_u32(&mut out, p.weights.rows() as u32);
        put_u32(&mut out, p.weights.cols() as u32);
        for w in p.weights.data() {
            out.extend_from_slice(&(w.to_f64_lossy() as f32).to_le_bytes());
        }
        put_u32(&mut out, p.bias.len() as u32);
        for b in &p.bias {
            out.extend_from_slice(&(b.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_fcnw<R: Read>(src: R) -> Result<Network<f32>> {
    let mut r = Reader { inner: src };
    let (arch, count) = read_header(&mut r, FCNW_MAGIC)?;
    let mut layers = Vec::with_capacity(count.min(1024));
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let l = read_layer(&mut r)?;
        let (rows, cols) = read_dims(&mut r, &l)?;
        let w = (0..rows * cols).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let nb = r.len()?;
        let b = (0..nb).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        layers.push(l);
        params.push((Matrix::from_vec(rows, cols, w)?, b));
    }
    r.end()?;
    let mut net = check_layers(&arch, layers)?;
    for (i, (w, b)) in params.into_iter().enumerate() {
        net.set_params(i, w, b).map_err(|e| fmt_err(e.to_string()))?;
    }
    Ok(net)
}

pub fn fcnq_bytes(q: &QuantizedNetwork) -> Vec<u8> {
    let mut out = Vec::new();
    put_header(&mut out, FCNQ_MAGIC, q.arch(), q.layers().len());
    for (i, l) in q.layers().iter().enumerate() {
        put_layer(&mut out, l);
        if !l.has_params() {
            continue;
        }
        let d = &q.dfp().layers[i];
        out.push(d.w_bw);
        out.push(d.a_bw);
        for v in [d.w_fl, d.a_in, d.a_out, d.col_fl] {
            put_i32(&mut out, v);
        }
        let ql = &q.qlayers()[i];
        put_u32(&mut out, ql.weights.rows() as u32);
        put_u32(&mut out, ql.weights.cols() as u32);
        out.extend(ql.weights.data().iter().map(|&v| v as u8));
        put_u32(&mut out, ql.bias.len() as u32);
        for &b in &ql.bias {
            put_i32(&mut out, b);
        }
    }
    out
}

pub fn read_fcnq<R: Read>(src: R) -> Result<QuantizedNetwork> {
    let mut r = Reader { inner: src };
    let (arch, count) = read_header(&mut r, FCNQ_MAGIC)?;
    let mut layers = Vec::new();
    let mut qlayers = Vec::new();
    let mut dfp = Vec::new();
    for _ in 0..count {
        let l = read_layer(&mut r)?;
        if l.has_params() {
            let (w_bw, a_bw) = (r.u8()?, r.u8()?);
            let (w_fl, a_in, a_out, col_fl) = (r.i32()?, r.i32()?, r.i32()?, r.i32()?);
            dfp.push(LayerDfp {
                w_bw,
                a_bw,
                w_fl,
                a_in,
                a_out,
                col_fl,
            });
            let (rows, cols) = read_dims(&mut r, &l)?;
            let w = (0..rows * cols).map(|_| Ok(r.u8()? as i8)).collect::<Result<Vec<_>>>()?;
            let nb = r.len()?;
            let bias = (0..nb).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
            qlayers.push(QuantLayer {
                weights: Matrix::from_vec(rows, cols, w)?,
                bias,
            });
        }
        layers.push(l);
    }
    r.end()?;
    let net = check_layers(&arch, layers)?;
    QuantizedNetwork::new(arch, net.layers().to_vec(), qlayers, DfpParams { layers: dfp })
        .map_err(|e| fmt_err(e.to_string()))
}

pub fn ircd_bytes(c: &IrisCode) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(IRCD_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, c.rows() as u32);
    put_u32(&mut out, c.cols() as u32);
    for w in c.code_words().iter().chain(c.mask_words()) {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn read_ircd<R: Read>(src: R) -> Result<IrisCode> {
    let mut r = Reader { inner: src };
    r.expect_magic(IRCD_MAGIC)?;
    let (rows, cols) = (r.len()?, r.len()?);
    let n = (rows * cols).div_ceil(64);
    if n > MAX_ELEMENTS {
        return Err(fmt_err("code dims are implausibly large"));
    }
    let code = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let mask = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    r.end()?;
    IrisCode::from_words(rows, cols, code, mask).map_err(|e| fmt_err(e.to_string()))
}

/// Which weight format a file holds, by magic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightsKind {
    Float,
    Quantized,
}

pub fn detect_weights(bytes: &[u8]) -> Result<WeightsKind> {
    match bytes.get(..4) {
        Some(m) if m == FCNW_MAGIC => Ok(WeightsKind::Float),
        Some(m) if m == FCNQ_MAGIC => Ok(WeightsKind::Quantized),
        _ => Err(fmt_err("not an FCNW or FCNQ weights file")),
    }
}

pub fn save_fcnw<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    Ok(fs::write(path, fcnw_bytes(net))?)
}

pub fn load_fcnw(path: &Path) -> Result<Network<f32>> {
    read_fcnw(fs::read(path)?.as_slice())
}

pub fn save_fcnq(q: &QuantizedNetwork, path: &Path) -> Result<()> {
    Ok(fs::write(path, fcnq_bytes(q))?)
}

pub fn load_fcnq(path: &Path) -> Result<QuantizedNetwork> {
    read_fcnq(fs::read(path)?.as_slice())
}

pub fn save_ircd(c: &IrisCode, path: &Path) -> Result<()> {
    Ok(fs::write(path, ircd_bytes(c))?)
}

pub fn load_ircd(path: &Path) -> Result<IrisCode> {
    read_ircd(fs::read(path)?.as_slice())
}

/// Writes via a temporary sibling and a rename so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
