//! Trace and request containers.
//!
//! Text form (the interchange format):
//!
//! ```text
//! WRTRACE v1; N=3; seed=7
//! # scene num_primitives=4096 image_width=64 image_height=32 mean_fragment_span=96 fragments_per_pixel_mean=4 activity_prob=0.6 locality=0.99 grad_distribution=dyadic
//! # sched 0,0,1
//! 0,0,0x0000000f,12,12,12,12,-,...,-,0.5:0.25:1;0.125:0.5:0.5;...;-;...
//! ```
//!
//! A record row is `warp_id,iteration,mask,p0..p31,grads`: 32 primitive ids
//! with `-` for inactive lanes, then one field holding the lanes separated by
//! `;`, each lane's `N` values separated by `:`, `-` for inactive lanes.
//! `# sched warp,sm,subcore` lines carry an explicit schedule. Inactive lanes
//! read back as primitive 0 with zero gradients.
//!
//! Binary form: magic `WRTB`, little-endian, the same header fields, then
//! each record prefixed by its byte length.
//!
//! Request streams use the header `prim,param,value,sm,subcore,warp` in text
//! form and magic `WRRQ` in binary form.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::reducers::{Address, AtomicRequest, Origin};
use crate::simt::{LaneMask, WARP_SIZE};
use crate::workload::{GradDistribution, SceneSpec, Slot, Trace, WarpRecord};

pub const TRACE_MAGIC: &[u8; 4] = b"WRTB";
pub const REQUEST_MAGIC: &[u8; 4] = b"WRRQ";
pub const REQUEST_HEADER: &str = "prim,param,value,sm,subcore,warp";
const FORMAT_VERSION: u32 = 1;

fn parse_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        line,
        reason: reason.into(),
    }
}

fn dist_name(d: GradDistribution) -> &'static str {
    match d {
        GradDistribution::Dyadic => "dyadic",
        GradDistribution::Uniform => "uniform",
    }
}

pub fn write_trace_csv<W: Write>(trace: &Trace, mut w: W) -> Result<()> {
    let s = &trace.scene;
    writeln!(w, "WRTRACE v1; N={}; seed={}", s.params_per_primitive, s.seed)?;
    writeln!(
        w,
        "# scene num_primitives={} image_width={} image_height={} mean_fragment_span={} fragments_per_pixel_mean={} activity_prob={} locality={} grad_distribution={}",
        s.num_primitives,
        s.image_width,
        s.image_height,
        s.mean_fragment_span,
        s.fragments_per_pixel_mean,
        s.activity_prob,
        s.locality,
        dist_name(s.grad_distribution)
    )?;
    for (warp, slot) in &trace.schedule {
        writeln!(w, "# sched {warp},{},{}", slot.sm, slot.subcore)?;
    }
    let mut line = String::new();
    for rec in &trace.records {
        use std::fmt::Write as _;
        line.clear();
        let _ = write!(line, "{},{},{:#010x}", rec.warp_id, rec.iteration, rec.active);
        for lane in 0..WARP_SIZE {
            if rec.active.contains(lane) {
                let _ = write!(line, ",{}", rec.lane_primitive[lane]);
            } else {
                line.push_str(",-");
            }
        }
        line.push(',');
        for lane in 0..WARP_SIZE {
            if lane > 0 {
                line.push(';');
            }
            if !rec.active.contains(lane) {
                line.push('-');
                continue;
            }
            for (p, v) in rec.grads(lane).iter().enumerate() {
                if p > 0 {
                    line.push(':');
                }
                let _ = write!(line, "{v}");
            }
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn parse_header(line: &str) -> Result<(usize, u64)> {
    let mut parts = line.split(';').map(str::trim);
    if parts.next() != Some("WRTRACE v1") {
        return Err(parse_err(1, "expected `WRTRACE v1` header"));
    }
    let mut n = None;
    let mut seed = None;
    for part in parts {
        match part.split_once('=') {
            Some(("N", v)) => n = v.parse().ok(),
            Some(("seed", v)) => seed = v.parse().ok(),
            _ => return Err(parse_err(1, format!("unexpected header field `{part}`"))),
        }
    }
    match (n, seed) {
        (Some(n), Some(seed)) => Ok((n, seed)),
        _ => Err(parse_err(1, "header needs N=<params> and seed=<seed>")),
    }
}

fn parse_scene_line(line_no: usize, body: &str, scene: &mut SceneSpec) -> Result<()> {
    for kv in body.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| parse_err(line_no, format!("expected key=value, got `{kv}`")))?;
        let bad = |_| parse_err(line_no, format!("invalid value for {k}: `{v}`"));
        match k {
            "num_primitives" => scene.num_primitives = v.parse().map_err(|_| bad(()))?,
            "image_width" => scene.image_width = v.parse().map_err(|_| bad(()))?,
            "image_height" => scene.image_height = v.parse().map_err(|_| bad(()))?,
            "mean_fragment_span" => scene.mean_fragment_span = v.parse().map_err(|_| bad(()))?,
            "fragments_per_pixel_mean" => scene.fragments_per_pixel_mean = v.parse().map_err(|_| bad(()))?,
            "activity_prob" => scene.activity_prob = v.parse().map_err(|_| bad(()))?,
            "locality" => scene.locality = v.parse().map_err(|_| bad(()))?,
            "grad_distribution" => {
                scene.grad_distribution = match v {
                    "dyadic" => GradDistribution::Dyadic,
                    "uniform" => GradDistribution::Uniform,
                    _ => return Err(bad(())),
                }
            }
            _ => return Err(parse_err(line_no, format!("unknown scene key `{k}`"))),
        }
    }
    Ok(())
}

fn parse_record(line_no: usize, line: &str, params: usize) -> Result<WarpRecord> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 3 + WARP_SIZE + 1 {
        return Err(parse_err(
            line_no,
            format!("expected {} fields, found {}", 4 + WARP_SIZE, fields.len()),
        ));
    }
    let num = |s: &str, what: &str| -> Result<u32> {
        s.trim()
            .parse()
            .map_err(|_| parse_err(line_no, format!("invalid {what} `{s}`")))
    };
    let warp_id = num(fields[0], "warp_id")?;
    let iteration = num(fields[1], "iteration")?;
    let hex = fields[2].trim();
    let hex = hex.strip_prefix("0x").or_else(|| hex.strip_prefix("0X")).unwrap_or(hex);
    let active = LaneMask(
        u32::from_str_radix(hex, 16).map_err(|_| parse_err(line_no, format!("invalid mask `{}`", fields[2])))?,
    );

    let mut rec = WarpRecord::new(warp_id, iteration, params);
    rec.active = active;
    for lane in 0..WARP_SIZE {
        let f = fields[3 + lane].trim();
        match (f, active.contains(lane)) {
            ("-", false) => {}
            ("-", true) => {
                return Err(parse_err(
                    line_no,
                    format!("lane {lane} is active but has no primitive"),
                ))
            }
            (_, false) => {
                return Err(parse_err(
                    line_no,
                    format!("lane {lane} is inactive but has a primitive"),
                ))
            }
            (_, true) => rec.lane_primitive[lane] = num(f, "primitive id")?,
        }
    }
    let lanes: Vec<&str> = fields[3 + WARP_SIZE].split(';').collect();
    if lanes.len() != WARP_SIZE {
        return Err(parse_err(
            line_no,
            format!("expected {WARP_SIZE} lanes of gradients, found {}", lanes.len()),
        ));
    }
    for (lane, chunk) in lanes.iter().enumerate() {
        let chunk = chunk.trim();
        if !active.contains(lane) {
            if chunk != "-" {
                return Err(parse_err(line_no, format!("lane {lane} is inactive but has gradients")));
            }
            continue;
        }
        let dst = rec.grads_mut(lane);
        let mut count = 0;
        for (i, v) in chunk.split(':').enumerate() {
            if i >= params {
                count = i + 1;
                break;
            }
            dst[i] = v
                .parse()
                .map_err(|_| parse_err(line_no, format!("invalid gradient `{v}` in lane {lane}")))?;
            count = i + 1;
        }
        if count != params {
            return Err(parse_err(line_no, format!("lane {lane} needs {params} gradients")));
        }
    }
    Ok(rec)
}

pub fn read_trace_csv<R: BufRead>(r: R) -> Result<Trace> {
    let mut lines = r.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
    let (params, seed) = parse_header(&first?)?;
    let mut scene = SceneSpec {
        params_per_primitive: params,
        seed,
        ..SceneSpec::default()
    };
    let mut schedule = BTreeMap::new();
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            let comment = comment.trim_start();
            if let Some(body) = comment.strip_prefix("scene ") {
                parse_scene_line(line_no, body, &mut scene)?;
            } else if let Some(body) = comment.strip_prefix("sched ") {
                let v: Vec<u32> = body
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| parse_err(line_no, "sched expects warp,sm,subcore"))?;
                if v.len() != 3 {
                    return Err(parse_err(line_no, "sched expects warp,sm,subcore"));
                }
                schedule.insert(
                    v[0],
                    Slot {
                        sm: v[1],
                        subcore: v[2],
                    },
                );
            }
            continue;
        }
        records.push(parse_record(line_no, trimmed, params)?);
    }
    Ok(Trace {
        scene,
        records,
        schedule,
    })
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        self.0.write_all(&[v])?;
        Ok(())
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }
}

struct Reader<R: Read> {
    inner: R,
    offset: usize,
}

impl<R: Read> Reader<R> {
    fn bytes<const K: usize>(&mut self) -> Result<[u8; K]> {
        let mut buf = [0u8; K];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                parse_err(self.offset, "truncated binary input")
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += K;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        if &self.bytes::<4>()? != want {
            return Err(parse_err(0, "bad magic"));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(parse_err(4, format!("unsupported version {version}")));
        }
        Ok(())
    }
}

fn record_len(params: usize) -> usize {
    4 * 3 + 4 * WARP_SIZE + 8 * WARP_SIZE * params
}

pub fn write_trace_binary<W: Write>(trace: &Trace, w: W) -> Result<()> {
    let mut w = Writer(w);
    let s = &trace.scene;
    w.0.write_all(TRACE_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u32(s.params_per_primitive as u32)?;
    w.u64(s.seed)?;
    w.u32(s.num_primitives)?;
    w.u32(s.image_width)?;
    w.u32(s.image_height)?;
    w.f64(s.mean_fragment_span)?;
    w.f64(s.fragments_per_pixel_mean)?;
    w.f64(s.activity_prob)?;
    w.f64(s.locality)?;
    w.u8(match s.grad_distribution {
        GradDistribution::Dyadic => 0,
        GradDistribution::Uniform => 1,
    })?;
    w.u32(trace.schedule.len() as u32)?;
    for (warp, slot) in &trace.schedule {
        w.u32(*warp)?;
        w.u32(slot.sm)?;
        w.u32(slot.subcore)?;
    }
    w.u64(trace.records.len() as u64)?;
    let len = record_len(s.params_per_primitive) as u32;
    for rec in &trace.records {
        w.u32(len)?;
        w.u32(rec.warp_id)?;
        w.u32(rec.iteration)?;
        w.u32(rec.active.bits())?;
        for p in rec.lane_primitive {
            w.u32(p)?;
        }
        for v in &rec.lane_grads {
            w.f64(*v)?;
        }
    }
    w.0.flush()?;
    Ok(())
}

pub fn read_trace_binary<R: Read>(r: R) -> Result<Trace> {
    let mut r = Reader { inner: r, offset: 0 };
    r.magic(TRACE_MAGIC)?;
    let params = r.u32()? as usize;
    let mut scene = SceneSpec {
        params_per_primitive: params,
        seed: r.u64()?,
        num_primitives: r.u32()?,
        image_width: r.u32()?,
        image_height: r.u32()?,
        mean_fragment_span: r.f64()?,
        fragments_per_pixel_mean: r.f64()?,
        activity_prob: r.f64()?,
        locality: r.f64()?,
        ..SceneSpec::default()
    };
    scene.grad_distribution = match r.u8()? {
        0 => GradDistribution::Dyadic,
        1 => GradDistribution::Uniform,
        other => {
            return Err(parse_err(
                r.offset,
                format!("unknown gradient distribution tag {other}"),
            ))
        }
    };
    let mut schedule = BTreeMap::new();
    for _ in 0..r.u32()? {
        let warp = r.u32()?;
        let slot = Slot {
            sm: r.u32()?,
            subcore: r.u32()?,
        };
        schedule.insert(warp, slot);
    }
    let count = r.u64()?;
    let want = record_len(params) as u32;
    let mut records = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        if len != want {
            return Err(parse_err(r.offset, format!("record length {len}, expected {want}")));
        }
        let mut rec = WarpRecord::new(r.u32()?, r.u32()?, params);
        rec.active = LaneMask(r.u32()?);
        for p in rec.lane_primitive.iter_mut() {
            *p = r.u32()?;
        }
        for v in rec.lane_grads.iter_mut() {
            *v = r.f64()?;
        }
        records.push(rec);
    }
    Ok(Trace {
        scene,
        records,
        schedule,
    })
}

pub fn write_requests_csv<'a, W: Write>(requests: impl IntoIterator<Item = &'a AtomicRequest>, mut w: W) -> Result<()> {
    writeln!(w, "{REQUEST_HEADER}")?;
    for r in requests {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.address.primitive, r.address.param, r.value, r.source.sm, r.source.subcore, r.source.warp
        )?;
    }
    Ok(())
}

pub fn read_requests_csv<R: BufRead>(r: R) -> Result<Vec<AtomicRequest>> {
    let mut lines = r.lines().enumerate();
    match lines.next() {
        Some((_, Ok(h))) if h.trim() == REQUEST_HEADER => {}
        Some((_, Err(e))) => return Err(e.into()),
        _ => return Err(parse_err(1, format!("expected header `{REQUEST_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(parse_err(line_no, format!("expected 6 fields, found {}", f.len())));
        }
        let int = |i: usize| -> Result<u32> {
            f[i].parse()
                .map_err(|_| parse_err(line_no, format!("invalid integer `{}`", f[i])))
        };
        let param: u16 = f[1]
            .parse()
            .map_err(|_| parse_err(line_no, format!("invalid param `{}`", f[1])))?;
        out.push(AtomicRequest {
            address: Address {
                primitive: int(0)?,
                param,
            },
            value: f[2]
                .parse()
                .map_err(|_| parse_err(line_no, format!("invalid value `{}`", f[2])))?,
            source: Origin {
                sm: int(3)?,
                subcore: int(4)?,
                warp: int(5)?,
            },
        });
    }
    Ok(out)
}

pub fn write_requests_binary<'a, W: Write>(requests: impl IntoIterator<Item = &'a AtomicRequest>, w: W) -> Result<()> {
    let requests: Vec<&AtomicRequest> = requests.into_iter().collect();
    let mut w = Writer(w);
    w.0.write_all(REQUEST_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u64(requests.len() as u64)?;
    for r in requests {
        w.u32(r.address.primitive)?;
        w.u32(r.address.param as u32)?;
        w.f64(r.value)?;
        w.u32(r.source.sm)?;
        w.u32(r.source.subcore)?;
        w.u32(r.source.warp)?;
    }
    w.0.flush()?;
    Ok(())
}

pub fn read_requests_binary<R: Read>(r: R) -> Result<Vec<AtomicRequest>> {
    let mut r = Reader { inner: r, offset: 0 };
    r.magic(REQUEST_MAGIC)?;
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let primitive = r.u32()?;
        let param = r.u32()?;
        let param = u16::try_from(param).map_err(|_| parse_err(r.offset, format!("param {param} out of range")))?;
        out.push(AtomicRequest {
            address: Address { primitive, param },
            value: r.f64()?,
            source: Origin {
                sm: r.u32()?,
                subcore: r.u32()?,
                warp: r.u32()?,
            },
        });
    }
    Ok(out)
}
