//! Posterior draws: in-memory records, an append-only binary log and chain
//! checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::Indicators;
use crate::error::{Error, Result};
use crate::model::{ChainState, ClusterParams, StickState};
use crate::sampler::PreparedModel;

const DRAWS_MAGIC: &[u8; 8] = b"FCDRAWS\0";
const CHECKPOINT_MAGIC: &[u8; 8] = b"FCCHKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecordOptions {
    /// Keep every `thin`-th sweep.
    pub thin: u64,
    pub store_b: bool,
    pub store_latent: bool,
}

impl Default for RecordOptions {
    fn default() -> Self {
        RecordOptions {
            thin: 1,
            store_b: false,
            store_latent: false,
        }
    }
}

/// One recorded sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub sweep: u64,
    /// Complete-data log posterior, up to a constant.
    pub log_post: f64,
    pub beta: DVector<f64>,
    pub psi: DMatrix<f64>,
    pub sticks: Vec<f64>,
    pub clusters: Vec<ClusterParams>,
    pub alloc: Vec<u16>,
    pub b: Option<Vec<DVector<f64>>>,
    pub latent: Option<Vec<DVector<f64>>>,
}

impl Draw {
    pub fn from_state(state: &ChainState, sweep: u64, log_post: f64, record: &RecordOptions) -> Self {
        Draw {
            sweep,
            log_post,
            beta: state.beta.clone(),
            psi: state.psi.clone(),
            sticks: state.sticks.fractions().to_vec(),
            clusters: state.clusters.clone(),
            alloc: state.alloc.iter().map(|&c| c as u16).collect(),
            b: record.store_b.then(|| state.b.clone()),
            latent: record.store_latent.then(|| state.latent.clone()),
        }
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn occupancy(&self) -> Vec<usize> {
        let mut m = vec![0; self.k()];
        for &c in &self.alloc {
            m[c as usize] += 1;
        }
        m
    }
}

/// All kept draws of one chain, in sweep order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    pub chain: u64,
    pub draws: Vec<Draw>,
}

/// Shape information needed to decode records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreLayout {
    pub n_subjects: usize,
    pub q: usize,
    pub r: usize,
    pub k: usize,
    /// Basis width of each varying-coefficient covariate.
    pub widths: Vec<usize>,
    pub obs_per_subject: Vec<usize>,
    pub store_b: bool,
    pub store_latent: bool,
}

impl StoreLayout {
    pub fn new(model: &PreparedModel, record: &RecordOptions) -> Self {
        let dims = model.dataset().dims();
        StoreLayout {
            n_subjects: model.n_subjects(),
            q: dims.q,
            r: dims.r,
            k: model.k(),
            widths: model.layout().widths.clone(),
            obs_per_subject: model.dataset().subjects().iter().map(|s| s.n_obs()).collect(),
            store_b: record.store_b,
            store_latent: record.store_latent,
        }
    }
}

fn fmt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

fn write_header<W: Write>(w: &mut W, magic: &[u8; 8], chain: u64, layout: &StoreLayout) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u64::<LE>(chain)?;
    let json = serde_json::to_vec(layout).expect("layout serializes");
    w.write_u32::<LE>(json.len() as u32)?;
    w.write_all(&json)
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 8], path: &Path) -> Result<(u64, StoreLayout)> {
    let io = |e| Error::io(path, e);
    let mut m = [0u8; 8];
    r.read_exact(&mut m).map_err(io)?;
    if &m != magic {
        return Err(fmt_err(path, "bad magic bytes"));
    }
    let version = r.read_u32::<LE>().map_err(io)?;
    if version != FORMAT_VERSION {
        return Err(fmt_err(path, format!("unsupported format version {version}")));
    }
    let chain = r.read_u64::<LE>().map_err(io)?;
    let len = r.read_u32::<LE>().map_err(io)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io)?;
    let layout = serde_json::from_slice(&json).map_err(|e| fmt_err(path, e))?;
    Ok((chain, layout))
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    xs.iter().try_for_each(|&x| w.write_f64::<LE>(x))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    (0..n).map(|_| r.read_f64::<LE>()).collect()
}

fn write_clusters<W: Write>(w: &mut W, clusters: &[ClusterParams]) -> std::io::Result<()> {
    for c in clusters {
        w.write_f64::<LE>(c.tau)?;
        for g in &c.gamma {
            for &bit in g.bits() {
                w.write_u8(bit as u8)?;
            }
        }
        write_f64s(w, c.phi.as_slice())?;
    }
    Ok(())
}

fn read_clusters<R: Read>(r: &mut R, layout: &StoreLayout, path: &Path) -> Result<Vec<ClusterParams>> {
    let io = |e| Error::io(path, e);
    let mut out = Vec::with_capacity(layout.k);
    for _ in 0..layout.k {
        let tau = r.read_f64::<LE>().map_err(io)?;
        let mut gamma = Vec::with_capacity(layout.widths.len());
        for &width in &layout.widths {
            let mut bytes = vec![0u8; width];
            r.read_exact(&mut bytes).map_err(io)?;
            let bits = bytes.iter().map(|&b| b == 1).collect();
            gamma.push(Indicators::new(bits).map_err(|e| fmt_err(path, e))?);
        }
        let d: usize = gamma.iter().map(Indicators::active_count).sum();
        let phi = DVector::from_vec(read_f64s(r, d).map_err(io)?);
        out.push(ClusterParams { gamma, phi, tau });
    }
    Ok(out)
}

fn write_vectors<W: Write>(w: &mut W, vs: &[DVector<f64>]) -> std::io::Result<()> {
    vs.iter().try_for_each(|v| write_f64s(w, v.as_slice()))
}

fn read_vectors<R: Read>(r: &mut R, lens: impl Iterator<Item = usize>) -> std::io::Result<Vec<DVector<f64>>> {
    lens.map(|n| read_f64s(r, n).map(DVector::from_vec)).collect()
}

fn write_draw<W: Write>(w: &mut W, d: &Draw, layout: &StoreLayout) -> Result<()> {
    if d.beta.len() != layout.q || d.clusters.len() != layout.k || d.alloc.len() != layout.n_subjects {
        return Err(Error::Internal("draw does not match the store layout".into()));
    }
    if d.b.is_some() != layout.store_b || d.latent.is_some() != layout.store_latent {
        return Err(Error::Internal("draw fields do not match the store layout".into()));
    }
    let go = |w: &mut W| -> std::io::Result<()> {
        w.write_u64::<LE>(d.sweep)?;
        w.write_f64::<LE>(d.log_post)?;
        write_f64s(w, d.beta.as_slice())?;
        write_f64s(w, d.psi.as_slice())?;
        write_f64s(w, &d.sticks)?;
        write_clusters(w, &d.clusters)?;
        d.alloc.iter().try_for_each(|&c| w.write_u16::<LE>(c))?;
        if let Some(b) = &d.b {
            write_vectors(w, b)?;
        }
        if let Some(l) = &d.latent {
            write_vectors(w, l)?;
        }
        Ok(())
    };
    go(w).map_err(|e| Error::io("draw log", e))
}

/// Reads one record, or `None` at a clean end of file.
fn read_draw<R: Read>(r: &mut R, layout: &StoreLayout, path: &Path) -> Result<Option<Draw>> {
    let sweep = match r.read_u64::<LE>() {
        Ok(s) => s,
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    let trunc = |e: std::io::Error| {
        if e.kind() == ErrorKind::UnexpectedEof {
            fmt_err(path, format!("truncated record for sweep {sweep}"))
        } else {
            Error::io(path, e)
        }
    };
    let log_post = r.read_f64::<LE>().map_err(trunc)?;
    let beta = DVector::from_vec(read_f64s(r, layout.q).map_err(trunc)?);
    let psi = DMatrix::from_vec(layout.r, layout.r, read_f64s(r, layout.r * layout.r).map_err(trunc)?);
    let sticks = read_f64s(r, layout.k).map_err(trunc)?;
    let clusters = read_clusters(r, layout, path)?;
    let alloc = (0..layout.n_subjects)
        .map(|_| r.read_u16::<LE>())
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(trunc)?;
    if alloc.iter().any(|&c| c as usize >= layout.k) {
        return Err(fmt_err(path, "membership label out of range"));
    }
    let b = if layout.store_b {
        Some(read_vectors(r, std::iter::repeat_n(layout.r, layout.n_subjects)).map_err(trunc)?)
    } else {
        None
    };
    let latent = if layout.store_latent {
        Some(read_vectors(r, layout.obs_per_subject.iter().copied()).map_err(trunc)?)
    } else {
        None
    };
    Ok(Some(Draw {
        sweep,
        log_post,
        beta,
        psi,
        sticks,
        clusters,
        alloc,
        b,
        latent,
    }))
}

/// Append-only binary draw log for one chain.
pub struct DrawWriter {
    out: BufWriter<File>,
    layout: StoreLayout,
    path: PathBuf,
}

impl DrawWriter {
    pub fn create(path: impl AsRef<Path>, chain: u64, layout: StoreLayout) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        write_header(&mut out, DRAWS_MAGIC, chain, &layout).map_err(|e| Error::io(&path, e))?;
        Ok(DrawWriter { out, layout, path })
    }

    pub fn write(&mut self, draw: &Draw) -> Result<()> {
        write_draw(&mut self.out, draw, &self.layout).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(&self.path, source),
            other => other,
        })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a whole draw log.
pub fn read_draws(path: impl AsRef<Path>) -> Result<(StoreLayout, ChainDraws)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let (chain, layout) = read_header(&mut r, DRAWS_MAGIC, path)?;
    let mut draws = Vec::new();
    while let Some(d) = read_draw(&mut r, &layout, path)? {
        draws.push(d);
    }
    Ok((layout, ChainDraws { chain, draws }))
}

/// Sampler state saved between invocations.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub chain: u64,
    pub seed: u64,
    pub sweeps: u64,
    pub state: ChainState,
}

pub fn write_checkpoint(path: impl AsRef<Path>, cp: &Checkpoint, layout: &StoreLayout) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    let go = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_header(&mut w, CHECKPOINT_MAGIC, cp.chain, layout)?;
        w.write_u64::<LE>(cp.seed)?;
        w.write_u64::<LE>(cp.sweeps)?;
        let s = &cp.state;
        write_f64s(&mut w, s.beta.as_slice())?;
        write_f64s(&mut w, s.psi.as_slice())?;
        write_f64s(&mut w, s.sticks.fractions())?;
        write_clusters(&mut w, &s.clusters)?;
        s.alloc.iter().try_for_each(|&c| w.write_u32::<LE>(c as u32))?;
        write_vectors(&mut w, &s.b)?;
        write_vectors(&mut w, &s.latent)?;
        w.flush()?;
        drop(w);
        std::fs::rename(&tmp, path)
    };
    go().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(StoreLayout, Checkpoint)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let (chain, layout) = read_header(&mut r, CHECKPOINT_MAGIC, path)?;
    let io = |e| Error::io(path, e);
    let seed = r.read_u64::<LE>().map_err(io)?;
    let sweeps = r.read_u64::<LE>().map_err(io)?;
    let beta = DVector::from_vec(read_f64s(&mut r, layout.q).map_err(io)?);
    let psi = DMatrix::from_vec(layout.r, layout.r, read_f64s(&mut r, layout.r * layout.r).map_err(io)?);
    let sticks = StickState::new(read_f64s(&mut r, layout.k).map_err(io)?).map_err(|e| fmt_err(path, e))?;
    let clusters = read_clusters(&mut r, &layout, path)?;
    let alloc = (0..layout.n_subjects)
        .map(|_| r.read_u32::<LE>().map(|c| c as usize))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(io)?;
    let b = read_vectors(&mut r, std::iter::repeat_n(layout.r, layout.n_subjects)).map_err(io)?;
    let latent = read_vectors(&mut r, layout.obs_per_subject.iter().copied()).map_err(io)?;
    let state = ChainState {
        clusters,
        sticks,
        alloc,
        beta,
        b,
        psi,
        latent,
    };
    Ok((
        layout,
        Checkpoint {
            chain,
            seed,
            sweeps,
            state,
        },
    ))
}
