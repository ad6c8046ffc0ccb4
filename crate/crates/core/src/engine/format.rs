//! Binary engine file.
//!
//! ```text
//! "VQE1" | version u8 | flags u8
//! plan section:   u32 length | payload
//! params section: u32 count  | (f64 scale, i32 zero_point, u8 bits)*
//! weight section: u64 length | bytes
//! bias section:   u32 count  | i32*
//! CRC32 of everything above
//! ```
//! All integers are little-endian.

use super::{ByteRange, EngineError, EnginePlan, FallbackOp, FusedConvInt8, PlanOp, PlanTensor};
use crate::calib::QuantParams;
use crate::graph::DType;
use crate::kernels::ConvGeometry;

pub const ENGINE_MAGIC: &[u8; 4] = b"VQE1";
pub const ENGINE_VERSION: u8 = 1;
/// Set when the plan contains FP32 fallback ops.
pub const FLAG_FP32_FALLBACK: u8 = 1;

const HEADER_LEN: usize = 6;
const NO_PARAMS: u32 = u32::MAX;

mod tag {
    pub const QUANTIZE_INPUT: u8 = 1;
    pub const FUSED_CONV: u8 = 2;
    pub const MAXPOOL: u8 = 3;
    pub const UPSAMPLE: u8 = 4;
    pub const CONCAT: u8 = 5;
    pub const REQUANTIZE: u8 = 6;
    pub const DEQUANTIZE_OUTPUT: u8 = 7;
    pub const FALLBACK: u8 = 8;

    pub const FB_CONV: u8 = 1;
    pub const FB_RELU: u8 = 2;
    pub const FB_MAXPOOL: u8 = 3;
    pub const FB_UPSAMPLE: u8 = 4;
    pub const FB_CONCAT: u8 = 5;
    pub const FB_ADD: u8 = 6;
    pub const FB_SOFTMAX: u8 = 7;
    pub const FB_ARGMAX: u8 = 8;
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn dims(&mut self, d: &[usize]) {
        for &x in d {
            self.u32(x);
        }
    }
    fn ids(&mut self, ids: &[usize]) {
        self.u32(ids.len());
        self.dims(ids);
    }
    fn range(&mut self, r: &ByteRange) {
        self.u64(r.offset);
        self.u64(r.len);
    }
    fn geometry(&mut self, g: &ConvGeometry) {
        self.u32(g.in_channels);
        self.u32(g.out_channels);
        self.dims(&g.kernel);
        self.dims(&g.stride);
        self.dims(&g.padding);
        self.dims(&g.input);
        self.dims(&g.output);
    }
}

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::U8 => 1,
        DType::I32 => 2,
        DType::U16 => 3,
    }
}

fn encode_plan(p: &EnginePlan) -> Vec<u8> {
    let mut w = Writer::default();
    w.str(&p.name);
    w.u32(p.batch);
    w.u32(p.tensors.len());
    for t in &p.tensors {
        w.str(&t.name);
        w.u8(dtype_code(t.dtype));
        w.dims(&t.shape);
        w.u32(t.params.map_or(NO_PARAMS as usize, |x| x));
    }
    w.ids(&p.inputs);
    w.ids(&p.outputs);
    w.u32(p.ops.len());
    for op in &p.ops {
        match op {
            PlanOp::QuantizeInput { input, output } => {
                w.u8(tag::QUANTIZE_INPUT);
                w.dims(&[*input, *output]);
            }
            PlanOp::FusedConvInt8(c) => {
                w.u8(tag::FUSED_CONV);
                w.dims(&[c.input, c.output]);
                w.geometry(&c.geometry);
                w.range(&c.weights);
                w.u32(c.weight_params);
                w.u32(c.bias_offset);
                w.f64(c.requant_multiplier);
                w.u8(c.relu_fused as u8);
                w.i32(c.clamp_lo);
            }
            PlanOp::MaxPoolInt8 {
                input,
                output,
                kernel,
                stride,
            } => {
                w.u8(tag::MAXPOOL);
                w.dims(&[*input, *output]);
                w.dims(kernel);
                w.dims(stride);
            }
            PlanOp::UpsampleInt8 { input, output, scale } => {
                w.u8(tag::UPSAMPLE);
                w.dims(&[*input, *output]);
                w.dims(scale);
            }
            PlanOp::ConcatInt8 { inputs, output, axis } => {
                w.u8(tag::CONCAT);
                w.ids(inputs);
                w.u32(*output);
                w.u32(*axis);
            }
            PlanOp::RequantizeTensor { input, output } => {
                w.u8(tag::REQUANTIZE);
                w.dims(&[*input, *output]);
            }
            PlanOp::DequantizeOutput { input, output } => {
                w.u8(tag::DEQUANTIZE_OUTPUT);
                w.dims(&[*input, *output]);
            }
            PlanOp::Fp32Fallback { op, inputs, output } => {
                w.u8(tag::FALLBACK);
                w.ids(inputs);
                w.u32(*output);
                match op {
                    FallbackOp::Conv3D { geometry, weight, bias } => {
                        w.u8(tag::FB_CONV);
                        w.geometry(geometry);
                        w.range(weight);
                        match bias {
                            Some(b) => {
                                w.u8(1);
                                w.range(b);
                            }
                            None => w.u8(0),
                        }
                    }
                    FallbackOp::ReLU => w.u8(tag::FB_RELU),
                    FallbackOp::MaxPool3D { kernel, stride } => {
                        w.u8(tag::FB_MAXPOOL);
                        w.dims(kernel);
                        w.dims(stride);
                    }
                    FallbackOp::Upsample3D { scale } => {
                        w.u8(tag::FB_UPSAMPLE);
                        w.dims(scale);
                    }
                    FallbackOp::Concat { axis } => {
                        w.u8(tag::FB_CONCAT);
                        w.u32(*axis);
                    }
                    FallbackOp::Add => w.u8(tag::FB_ADD),
                    FallbackOp::Softmax { axis } => {
                        w.u8(tag::FB_SOFTMAX);
                        w.u32(*axis);
                    }
                    FallbackOp::ArgMax { axis } => {
                        w.u8(tag::FB_ARGMAX);
                        w.u32(*axis);
                    }
                }
            }
        }
    }
    w.u64(p.workspace_bytes as usize);
    w.buf
}

/// Byte sizes of each part of an engine file.
pub(crate) struct Layout {
    pub header: usize,
    pub plan: usize,
    pub params: usize,
    pub weights: usize,
    pub biases: usize,
    pub checksum: usize,
}

pub(crate) fn layout(p: &EnginePlan) -> Layout {
    Layout {
        header: HEADER_LEN,
        plan: 4 + encode_plan(p).len(),
        params: 4 + p.params.len() * 13,
        weights: 8 + p.weights.len(),
        biases: 4 + p.biases.len() * 4,
        checksum: 4,
    }
}

/// Canonical encoding of a plan; `deserialize_engine` inverts it exactly.
pub fn serialize_engine(p: &EnginePlan) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(ENGINE_MAGIC);
    w.u8(ENGINE_VERSION);
    w.u8(if p.has_fallback() { FLAG_FP32_FALLBACK } else { 0 });
    let plan = encode_plan(p);
    w.u32(plan.len());
    w.buf.extend_from_slice(&plan);
    w.u32(p.params.len());
    for q in &p.params {
        w.f64(q.scale);
        w.i32(q.zero_point);
        w.u8(q.bits);
    }
    w.u64(p.weights.len());
    w.buf.extend_from_slice(&p.weights);
    w.u32(p.biases.len());
    for &b in &p.biases {
        w.i32(b);
    }
    let crc = crc32fast::hash(&w.buf);
    w.buf.extend_from_slice(&crc.to_le_bytes());
    w.buf
}

/// Reader over a byte slice; running off the end is reported as `Eof`.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

#[derive(Debug)]
enum ReadErr {
    Eof,
    Bad(String),
}

type R<T> = Result<T, ReadErr>;

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> R<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(ReadErr::Eof)?;
        let s = self.buf.get(self.pos..end).ok_or(ReadErr::Eof)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> R<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> R<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> R<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| ReadErr::Eof)
    }
    fn i32(&mut self) -> R<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> R<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> R<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ReadErr::Bad("invalid UTF-8 in name".into()))
    }
    fn dims<const N: usize>(&mut self) -> R<[usize; N]> {
        let mut out = [0; N];
        for d in &mut out {
            *d = self.u32()?;
        }
        Ok(out)
    }
    /// Length-prefixed id list; the count is checked against the remaining bytes.
    fn ids(&mut self) -> R<Vec<usize>> {
        let n = self.u32()?;
        if n.saturating_mul(4) > self.buf.len() - self.pos {
            return Err(ReadErr::Eof);
        }
        (0..n).map(|_| self.u32()).collect()
    }
    fn range(&mut self) -> R<ByteRange> {
        Ok(ByteRange {
            offset: self.u64()?,
            len: self.u64()?,
        })
    }
    fn geometry(&mut self) -> R<ConvGeometry> {
        Ok(ConvGeometry {
            in_channels: self.u32()?,
            out_channels: self.u32()?,
            kernel: self.dims()?,
            stride: self.dims()?,
            padding: self.dims()?,
            input: self.dims()?,
            output: self.dims()?,
        })
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn decode_plan(r: &mut Reader) -> R<EnginePlan> {
    let name = r.str()?;
    let batch = r.u32()?;
    let n_tensors = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..n_tensors {
        let name = r.str()?;
        let dtype = match r.u8()? {
            0 => DType::F32,
            1 => DType::U8,
            2 => DType::I32,
            3 => DType::U16,
            d => return Err(ReadErr::Bad(format!("unknown dtype code {d}"))),
        };
        let shape = r.dims::<5>()?;
        let params = match r.u32()? {
            x if x == NO_PARAMS as usize => None,
            x => Some(x),
        };
        tensors.push(PlanTensor {
            name,
            dtype,
            shape,
            params,
        });
    }
    let inputs = r.ids()?;
    let outputs = r.ids()?;
    let n_ops = r.u32()?;
    let mut ops = Vec::new();
    for _ in 0..n_ops {
        let op = match r.u8()? {
            tag::QUANTIZE_INPUT => {
                let [input, output] = r.dims()?;
                PlanOp::QuantizeInput { input, output }
            }
            tag::FUSED_CONV => {
                let [input, output] = r.dims()?;
                PlanOp::FusedConvInt8(FusedConvInt8 {
                    input,
                    output,
                    geometry: r.geometry()?,
                    weights: r.range()?,
                    weight_params: r.u32()?,
                    bias_offset: r.u32()?,
                    requant_multiplier: r.f64()?,
                    relu_fused: match r.u8()? {
                        0 => false,
                        1 => true,
                        v => return Err(ReadErr::Bad(format!("bad relu flag {v}"))),
                    },
                    clamp_lo: r.i32()?,
                })
            }
            tag::MAXPOOL => {
                let [input, output] = r.dims()?;
                PlanOp::MaxPoolInt8 {
                    input,
                    output,
                    kernel: r.dims()?,
                    stride: r.dims()?,
                }
            }
            tag::UPSAMPLE => {
                let [input, output] = r.dims()?;
                PlanOp::UpsampleInt8 {
                    input,
                    output,
                    scale: r.dims()?,
                }
            }
            tag::CONCAT => PlanOp::ConcatInt8 {
                inputs: r.ids()?,
                output: r.u32()?,
                axis: r.u32()?,
            },
            tag::REQUANTIZE => {
                let [input, output] = r.dims()?;
                PlanOp::RequantizeTensor { input, output }
            }
            tag::DEQUANTIZE_OUTPUT => {
                let [input, output] = r.dims()?;
                PlanOp::DequantizeOutput { input, output }
            }
            tag::FALLBACK => {
                let inputs = r.ids()?;
                let output = r.u32()?;
                let op = match r.u8()? {
                    tag::FB_CONV => FallbackOp::Conv3D {
                        geometry: r.geometry()?,
                        weight: r.range()?,
                        bias: match r.u8()? {
                            0 => None,
                            1 => Some(r.range()?),
                            v => return Err(ReadErr::Bad(format!("bad bias flag {v}"))),
                        },
                    },
                    tag::FB_RELU => FallbackOp::ReLU,
                    tag::FB_MAXPOOL => FallbackOp::MaxPool3D {
                        kernel: r.dims()?,
                        stride: r.dims()?,
                    },
                    tag::FB_UPSAMPLE => FallbackOp::Upsample3D { scale: r.dims()? },
                    tag::FB_CONCAT => FallbackOp::Concat { axis: r.u32()? },
                    tag::FB_ADD => FallbackOp::Add,
                    tag::FB_SOFTMAX => FallbackOp::Softmax { axis: r.u32()? },
                    tag::FB_ARGMAX => FallbackOp::ArgMax { axis: r.u32()? },
                    t => return Err(ReadErr::Bad(format!("unknown fallback op tag {t}"))),
                };
                PlanOp::Fp32Fallback { op, inputs, output }
            }
            t => return Err(ReadErr::Bad(format!("unknown op tag {t}"))),
        };
        ops.push(op);
    }
    let workspace_bytes = r.u64()? as u64;
    Ok(EnginePlan {
        name,
        batch,
        tensors,
        inputs,
        outputs,
        ops,
        params: Vec::new(),
        weights: Vec::new(),
        biases: Vec::new(),
        workspace_bytes,
    })
}

/// Decode everything after the header. `body` excludes the trailing CRC.
fn decode_body(body: &[u8]) -> R<(u8, EnginePlan)> {
    let mut r = Reader::new(body);
    r.take(5)?;
    let flags = r.u8()?;
    let plan_len = r.u32()?;
    let plan_bytes = r.take(plan_len)?;
    let n_params = r.u32()?;
    let mut params = Vec::new();
    for _ in 0..n_params {
        params.push(QuantParams {
            scale: r.f64()?,
            zero_point: r.i32()?,
            bits: r.u8()?,
        });
    }
    let n_weights = r.u64()?;
    let weights = r.take(n_weights)?.to_vec();
    let n_biases = r.u32()?;
    let biases = r
        .take(n_biases.checked_mul(4).ok_or(ReadErr::Eof)?)?
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !r.done() {
        return Err(ReadErr::Bad(format!(
            "{} unexpected bytes before the checksum",
            body.len() - r.pos
        )));
    }
    let mut pr = Reader::new(plan_bytes);
    let mut plan = decode_plan(&mut pr).map_err(|e| match e {
        // A plan section shorter than its own contents is corrupt, not truncated.
        ReadErr::Eof => ReadErr::Bad("plan section ends early".into()),
        other => other,
    })?;
    if !pr.done() {
        return Err(ReadErr::Bad("trailing bytes in plan section".into()));
    }
    plan.params = params;
    plan.weights = weights;
    plan.biases = biases;
    Ok((flags, plan))
}

/// Parse and validate an engine file.
///
/// Header problems are reported first (`BadMagic`, `UnsupportedVersion`).
/// When the checksum does not match, a file whose sections declare more
/// bytes than it contains is reported as `TruncatedFile` and anything else as
/// `ChecksumMismatch`.
pub fn deserialize_engine(bytes: &[u8]) -> Result<EnginePlan, EngineError> {
    if bytes.len() < 4 || &bytes[..4] != ENGINE_MAGIC {
        return Err(if bytes.len() < 4 && ENGINE_MAGIC.starts_with(bytes) {
            EngineError::TruncatedFile
        } else {
            EngineError::BadMagic
        });
    }
    let version = *bytes.get(4).ok_or(EngineError::TruncatedFile)?;
    if version != ENGINE_VERSION {
        return Err(EngineError::UnsupportedVersion(version));
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(EngineError::TruncatedFile);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    let decoded = decode_body(body);
    if stored != computed {
        return Err(match decoded {
            Err(ReadErr::Eof) => EngineError::TruncatedFile,
            _ => EngineError::ChecksumMismatch { stored, computed },
        });
    }
    let (flags, plan) = match decoded {
        Ok(x) => x,
        Err(ReadErr::Eof) => return Err(EngineError::TruncatedFile),
        Err(ReadErr::Bad(m)) => return Err(EngineError::Malformed(m)),
    };
    plan.validate().map_err(|e| EngineError::Malformed(e.to_string()))?;
    let expected_flags = if plan.has_fallback() { FLAG_FP32_FALLBACK } else { 0 };
    if flags != expected_flags {
        return Err(EngineError::Malformed(format!(
            "flags {flags:#04x} do not match the plan"
        )));
    }
    Ok(plan)
}
