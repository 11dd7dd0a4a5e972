#include "hsfl/wire.hpp"

#include <bit>
#include <cstring>

namespace hsfl {

const char* msg_kind_name(MsgKind kind) {
  switch (kind) {
    case MsgKind::kFeaturePair: return "FeaturePair";
    case MsgKind::kTaskFeature: return "TaskFeature";
    case MsgKind::kTaskLogits: return "TaskLogits";
    case MsgKind::kUpstreamGrad: return "UpstreamGrad";
    case MsgKind::kCutGrad: return "CutGrad";
    case MsgKind::kModelUpload: return "ModelUpload";
    case MsgKind::kModelDownload: return "ModelDownload";
    case MsgKind::kInferenceFeature: return "InferenceFeature";
    case MsgKind::kInferenceLogits: return "InferenceLogits";
  }
  return "Unknown";
}

bool msg_kind_is_upload(MsgKind kind) {
  switch (kind) {
    case MsgKind::kFeaturePair:
    case MsgKind::kTaskFeature:
    case MsgKind::kUpstreamGrad:
    case MsgKind::kModelUpload:
    case MsgKind::kInferenceFeature:
      return true;
    default:
      return false;
  }
}

namespace {

class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void i32(int32_t v) { u32(static_cast<uint32_t>(v)); }
  void f64(double v) {
    const uint64_t bits = std::bit_cast<uint64_t>(v);
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(bits >> (8 * i)));
  }
  void bytes(const std::vector<uint8_t>& v) { buf_.insert(buf_.end(), v.begin(), v.end()); }

  std::vector<uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<uint8_t> buf_;
};

class ByteReader {
 public:
  // `base` is the offset of this buffer inside the enclosing stream, so
  // errors report stream-absolute offsets.
  ByteReader(const uint8_t* data, size_t len, size_t base)
      : data_(data), len_(len), base_(base) {}

  size_t offset() const { return base_ + pos_; }
  size_t remaining() const { return len_ - pos_; }

  uint8_t u8() {
    need(1, "u8");
    return data_[pos_++];
  }
  uint32_t u32() {
    need(4, "u32");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  int32_t i32() { return static_cast<int32_t>(u32()); }
  double f64() {
    need(8, "f64");
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(bits);
  }
  std::vector<uint8_t> bytes(size_t n) {
    need(n, "byte run");
    std::vector<uint8_t> out(data_ + pos_, data_ + pos_ + n);
    pos_ += n;
    return out;
  }
  void expect_end() {
    if (pos_ != len_)
      throw DecodeError(offset(), std::to_string(len_ - pos_) + " trailing bytes in frame");
  }

 private:
  void need(size_t n, const char* what) {
    if (len_ - pos_ < n)
      throw DecodeError(offset(), std::string("truncated while reading ") + what);
  }

  const uint8_t* data_;
  size_t len_;
  size_t base_;
  size_t pos_ = 0;
};

std::vector<int> read_shape(ByteReader& r) {
  const uint8_t rank = r.u8();
  if (rank > 4) throw DecodeError(r.offset(), "tensor rank too large");
  std::vector<int> shape;
  size_t count = 1;
  for (int i = 0; i < rank; ++i) {
    const int32_t d = r.i32();
    if (d < 1 || d > (1 << 24)) throw DecodeError(r.offset(), "bad tensor dimension");
    count *= static_cast<size_t>(d);
    if (count > (1u << 26)) throw DecodeError(r.offset(), "tensor too large");
    shape.push_back(d);
  }
  return shape;
}

void write_shape(ByteWriter& w, const std::vector<int>& shape) {
  w.u8(static_cast<uint8_t>(shape.size()));
  for (int d : shape) w.i32(d);
}

size_t shape_count(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  return n;
}

void write_tensor(ByteWriter& w, const Tensor& t, const char* what) {
  if (t.empty()) throw Error(std::string("encode: empty tensor in ") + what);
  if (t.rank() < 1 || t.rank() > 4) throw Error(std::string("encode: bad tensor rank in ") + what);
  write_shape(w, t.shape);
  for (double v : t.data) w.f64(v);
}

Tensor read_tensor(ByteReader& r) {
  Tensor t;
  t.shape = read_shape(r);
  if (t.shape.empty()) throw DecodeError(r.offset(), "tensor with rank 0");
  const size_t n = shape_count(t.shape);
  t.data.resize(n);
  for (size_t i = 0; i < n; ++i) t.data[i] = r.f64();
  return t;
}

void write_quantized(ByteWriter& w, const QuantizedTensor& q, const char* what) {
  if (q.codes.empty()) throw Error(std::string("encode: empty quantized tensor in ") + what);
  if (q.bits < 1 || q.bits > 24) throw Error(std::string("encode: bad bit width in ") + what);
  if (q.hi < q.lo) throw Error(std::string("encode: inverted range in ") + what);
  if (q.codes.size() != shape_count(q.shape))
    throw Error(std::string("encode: code count does not match shape in ") + what);
  const uint32_t levels = (1u << q.bits) - 1;
  write_shape(w, q.shape);
  w.u8(static_cast<uint8_t>(q.bits));
  w.f64(q.lo);
  w.f64(q.hi);
  // Codes bit-packed LSB-first.
  std::vector<uint8_t> packed((q.codes.size() * static_cast<size_t>(q.bits) + 7) / 8, 0);
  for (size_t i = 0; i < q.codes.size(); ++i) {
    const uint32_t code = q.codes[i];
    if (code > levels) throw Error(std::string("encode: code exceeds levels in ") + what);
    for (int j = 0; j < q.bits; ++j) {
      if ((code >> j) & 1u) {
        const size_t bitpos = i * static_cast<size_t>(q.bits) + static_cast<size_t>(j);
        packed[bitpos / 8] |= static_cast<uint8_t>(1u << (bitpos % 8));
      }
    }
  }
  w.bytes(packed);
}

QuantizedTensor read_quantized(ByteReader& r) {
  QuantizedTensor q;
  q.shape = read_shape(r);
  if (q.shape.empty()) throw DecodeError(r.offset(), "quantized tensor with rank 0");
  q.bits = r.u8();
  if (q.bits < 1 || q.bits > 24) throw DecodeError(r.offset(), "bad quantizer bit width");
  q.lo = r.f64();
  q.hi = r.f64();
  if (!(q.hi >= q.lo)) throw DecodeError(r.offset(), "inverted quantizer range");
  const size_t n = shape_count(q.shape);
  const std::vector<uint8_t> packed = r.bytes((n * static_cast<size_t>(q.bits) + 7) / 8);
  const uint32_t levels = (1u << q.bits) - 1;
  q.codes.resize(n, 0);
  for (size_t i = 0; i < n; ++i) {
    uint32_t code = 0;
    for (int j = 0; j < q.bits; ++j) {
      const size_t bitpos = i * static_cast<size_t>(q.bits) + static_cast<size_t>(j);
      if (packed[bitpos / 8] & (1u << (bitpos % 8))) code |= 1u << j;
    }
    if (code > levels) throw DecodeError(r.offset(), "quantized code exceeds level count");
    q.codes[i] = code;
  }
  return q;
}

void write_indicator(ByteWriter& w, const std::vector<uint8_t>& ind) {
  for (uint8_t v : ind)
    if (v > 1) throw Error("encode: indicator bytes must be 0 or 1");
  w.u32(static_cast<uint32_t>(ind.size()));
  w.bytes(ind);
}

// Structural read only; the {0,1} schema rule is checked by audit_privacy so
// a smuggled-label transcript parses and gets *flagged* rather than aborting.
std::vector<uint8_t> read_indicator(ByteReader& r) {
  const uint32_t n = r.u32();
  if (n > (1u << 24)) throw DecodeError(r.offset(), "indicator too large");
  return r.bytes(n);
}

void write_block(ByteWriter& w, const ParamBlock& block) {
  w.i32(block.depth);
  w.i32(block.in_dim());
  w.i32(block.out_dim());
  for (double v : block.w.data) w.f64(v);
  for (double v : block.b.data) w.f64(v);
}

ParamBlock read_block(ByteReader& r) {
  ParamBlock block;
  block.depth = r.i32();
  if (block.depth < 0 || block.depth > 4096) throw DecodeError(r.offset(), "bad block depth");
  const int32_t in = r.i32();
  const int32_t out = r.i32();
  if (in < 1 || out < 1 || in > (1 << 16) || out > (1 << 16))
    throw DecodeError(r.offset(), "bad block dims");
  block.w = Tensor::zeros({in, out});
  for (double& v : block.w.data) v = r.f64();
  block.b = Tensor::zeros({out});
  for (double& v : block.b.data) v = r.f64();
  return block;
}

void write_blocks(ByteWriter& w, const std::vector<ParamBlock>& blocks, const char* what) {
  if (blocks.empty()) throw Error(std::string("encode: empty block list in ") + what);
  w.u32(static_cast<uint32_t>(blocks.size()));
  for (const ParamBlock& b : blocks) write_block(w, b);
}

std::vector<ParamBlock> read_blocks(ByteReader& r) {
  const uint32_t n = r.u32();
  if (n == 0 || n > 4096) throw DecodeError(r.offset(), "bad block count");
  std::vector<ParamBlock> blocks;
  blocks.reserve(n);
  for (uint32_t i = 0; i < n; ++i) blocks.push_back(read_block(r));
  return blocks;
}

void write_payload(ByteWriter& w, const WireMessage& msg) {
  switch (msg.kind) {
    case MsgKind::kFeaturePair: {
      const auto& b = std::get<FeaturePairBody>(msg.payload);
      w.i32(b.exit_depth);
      w.i32(b.split_depth);
      write_quantized(w, b.z_dagger, "FeaturePair.z_dagger");
      write_quantized(w, b.z_ddagger, "FeaturePair.z_ddagger");
      write_indicator(w, b.indicator);
      return;
    }
    case MsgKind::kTaskFeature: {
      const auto& b = std::get<TaskFeatureBody>(msg.payload);
      w.i32(b.depth);
      write_quantized(w, b.z, "TaskFeature.z");
      return;
    }
    case MsgKind::kTaskLogits:
      write_quantized(w, std::get<TaskLogitsBody>(msg.payload).logits, "TaskLogits.logits");
      return;
    case MsgKind::kUpstreamGrad:
      write_tensor(w, std::get<UpstreamGradBody>(msg.payload).grad, "UpstreamGrad.grad");
      return;
    case MsgKind::kCutGrad:
      write_tensor(w, std::get<CutGradBody>(msg.payload).grad, "CutGrad.grad");
      return;
    case MsgKind::kModelUpload:
      write_blocks(w, std::get<ModelUploadBody>(msg.payload).blocks, "ModelUpload");
      return;
    case MsgKind::kModelDownload:
      write_blocks(w, std::get<ModelDownloadBody>(msg.payload).blocks, "ModelDownload");
      return;
    case MsgKind::kInferenceFeature: {
      const auto& b = std::get<InferenceFeatureBody>(msg.payload);
      w.i32(b.depth);
      write_quantized(w, b.z, "InferenceFeature.z");
      return;
    }
    case MsgKind::kInferenceLogits:
      write_quantized(w, std::get<InferenceLogitsBody>(msg.payload).logits,
                      "InferenceLogits.logits");
      return;
  }
  throw Error("encode: unknown message kind");
}

Payload read_payload(ByteReader& r, MsgKind kind) {
  switch (kind) {
    case MsgKind::kFeaturePair: {
      FeaturePairBody b;
      b.exit_depth = r.i32();
      b.split_depth = r.i32();
      b.z_dagger = read_quantized(r);
      b.z_ddagger = read_quantized(r);
      b.indicator = read_indicator(r);
      return b;
    }
    case MsgKind::kTaskFeature: {
      TaskFeatureBody b;
      b.depth = r.i32();
      b.z = read_quantized(r);
      return b;
    }
    case MsgKind::kTaskLogits:
      return TaskLogitsBody{read_quantized(r)};
    case MsgKind::kUpstreamGrad:
      return UpstreamGradBody{read_tensor(r)};
    case MsgKind::kCutGrad:
      return CutGradBody{read_tensor(r)};
    case MsgKind::kModelUpload:
      return ModelUploadBody{read_blocks(r)};
    case MsgKind::kModelDownload:
      return ModelDownloadBody{read_blocks(r)};
    case MsgKind::kInferenceFeature: {
      InferenceFeatureBody b;
      b.depth = r.i32();
      b.z = read_quantized(r);
      return b;
    }
    case MsgKind::kInferenceLogits:
      return InferenceLogitsBody{read_quantized(r)};
  }
  throw DecodeError(r.offset(), "unknown message kind");
}

bool payload_matches_kind(const WireMessage& msg) {
  switch (msg.kind) {
    case MsgKind::kFeaturePair: return std::holds_alternative<FeaturePairBody>(msg.payload);
    case MsgKind::kTaskFeature: return std::holds_alternative<TaskFeatureBody>(msg.payload);
    case MsgKind::kTaskLogits: return std::holds_alternative<TaskLogitsBody>(msg.payload);
    case MsgKind::kUpstreamGrad: return std::holds_alternative<UpstreamGradBody>(msg.payload);
    case MsgKind::kCutGrad: return std::holds_alternative<CutGradBody>(msg.payload);
    case MsgKind::kModelUpload: return std::holds_alternative<ModelUploadBody>(msg.payload);
    case MsgKind::kModelDownload: return std::holds_alternative<ModelDownloadBody>(msg.payload);
    case MsgKind::kInferenceFeature:
      return std::holds_alternative<InferenceFeatureBody>(msg.payload);
    case MsgKind::kInferenceLogits:
      return std::holds_alternative<InferenceLogitsBody>(msg.payload);
  }
  return false;
}

}  // namespace

std::vector<uint8_t> encode(const WireMessage& msg) {
  if (!payload_matches_kind(msg)) throw Error("encode: payload type does not match kind");
  ByteWriter body;
  body.u8(kWireVersion);
  body.u8(static_cast<uint8_t>(msg.kind));
  body.u32(msg.round);
  body.u32(msg.step);
  body.u32(msg.client);
  write_payload(body, msg);
  std::vector<uint8_t> inner = body.take();

  ByteWriter frame;
  frame.u32(static_cast<uint32_t>(inner.size()));
  frame.bytes(inner);
  return frame.take();
}

namespace {

WireMessage decode_at(const uint8_t* data, size_t len, size_t base) {
  ByteReader header(data, len, base);
  const uint32_t body_len = header.u32();
  if (body_len != len - 4)
    throw DecodeError(base, "frame length field does not match buffer size");
  ByteReader r(data + 4, body_len, base + 4);
  const uint8_t version = r.u8();
  if (version != kWireVersion)
    throw DecodeError(base + 4, "unsupported wire version " + std::to_string(version));
  const uint8_t kind_raw = r.u8();
  if (kind_raw < 1 || kind_raw > 9)
    throw DecodeError(base + 5, "unknown message kind " + std::to_string(kind_raw));
  WireMessage msg;
  msg.kind = static_cast<MsgKind>(kind_raw);
  msg.round = r.u32();
  msg.step = r.u32();
  msg.client = r.u32();
  msg.payload = read_payload(r, msg.kind);
  r.expect_end();
  return msg;
}

}  // namespace

WireMessage decode(const std::vector<uint8_t>& frame) {
  if (frame.size() < 4) throw DecodeError(0, "buffer shorter than the length prefix");
  return decode_at(frame.data(), frame.size(), 0);
}

void TrafficLedger::record(const WireMessage& msg, size_t frame_bytes) {
  Counter& c = counters_[Key{msg.client, msg.round, msg.kind}];
  c.messages += 1;
  c.bytes += frame_bytes;
}

void TrafficLedger::merge(const TrafficLedger& other) {
  for (const auto& [key, c] : other.counters_) {
    Counter& mine = counters_[key];
    mine.messages += c.messages;
    mine.bytes += c.bytes;
  }
}

uint64_t TrafficLedger::bytes_up(uint32_t round) const {
  uint64_t total = 0;
  for (const auto& [key, c] : counters_)
    if (key.round == round && msg_kind_is_upload(key.kind)) total += c.bytes;
  return total;
}

uint64_t TrafficLedger::bytes_down(uint32_t round) const {
  uint64_t total = 0;
  for (const auto& [key, c] : counters_)
    if (key.round == round && !msg_kind_is_upload(key.kind)) total += c.bytes;
  return total;
}

uint64_t TrafficLedger::total_messages() const {
  uint64_t total = 0;
  for (const auto& [key, c] : counters_) total += c.messages;
  return total;
}

uint64_t TrafficLedger::messages_of(MsgKind kind) const {
  uint64_t total = 0;
  for (const auto& [key, c] : counters_)
    if (key.kind == kind) total += c.messages;
  return total;
}

WireMessage Channel::transfer(const WireMessage& msg) {
  const std::vector<uint8_t> frame = encode(msg);
  ledger_.record(msg, frame.size());
  if (recording_) transcript_.insert(transcript_.end(), frame.begin(), frame.end());
  return decode(frame);
}

void Channel::absorb(Channel&& other) {
  ledger_.merge(other.ledger_);
  transcript_.insert(transcript_.end(), other.transcript_.begin(), other.transcript_.end());
  other.transcript_.clear();
}

AuditReport audit_privacy(const std::vector<uint8_t>& transcript) {
  AuditReport report;
  size_t pos = 0;
  while (pos < transcript.size()) {
    if (transcript.size() - pos < 4) {
      report.corrupt = true;
      report.corrupt_offset = pos;
      report.corrupt_reason = "dangling bytes shorter than a length prefix";
      return report;
    }
    uint32_t body_len = 0;
    for (int i = 0; i < 4; ++i)
      body_len |= static_cast<uint32_t>(transcript[pos + static_cast<size_t>(i)]) << (8 * i);
    const size_t frame_len = 4 + static_cast<size_t>(body_len);
    if (transcript.size() - pos < frame_len) {
      report.corrupt = true;
      report.corrupt_offset = pos;
      report.corrupt_reason = "frame length overruns the transcript";
      return report;
    }
    WireMessage msg;
    try {
      msg = decode_at(transcript.data() + pos, frame_len, pos);
    } catch (const DecodeError& e) {
      report.corrupt = true;
      report.corrupt_offset = e.offset();
      report.corrupt_reason = e.what();
      return report;
    }
    report.counts[msg.kind] += 1;

    // Schema-level privacy rules. Parsing already guarantees every feature
    // payload is quantized and gradients are the only raw tensors; what can
    // still hide a label is the indicator byte vector.
    if (const auto* pair = std::get_if<FeaturePairBody>(&msg.payload)) {
      for (uint8_t v : pair->indicator) {
        if (v > 1) {
          report.violations.push_back(
              {report.frames, pos,
               "indicator byte " + std::to_string(static_cast<int>(v)) +
                   " outside {0,1} (possible smuggled label) in " + msg_kind_name(msg.kind)});
          break;
        }
      }
    }
    report.frames += 1;
    pos += frame_len;
  }
  return report;
}

}  // namespace hsfl
