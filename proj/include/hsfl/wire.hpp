#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "hsfl/backbone.hpp"
#include "hsfl/quantize.hpp"

namespace hsfl {

// The only channel across the client/server trust boundary. By construction
// no payload type can carry class labels: the closest thing is the binary
// same-class indicator, whose bytes are restricted to {0,1}.
enum class MsgKind : uint8_t {
  kFeaturePair = 1,       // client -> server: both quantized views + indicator
  kTaskFeature = 2,       // client -> server: quantized z for the task path
  kTaskLogits = 3,        // server -> client: quantized logits u
  kUpstreamGrad = 4,      // client -> server: dl_S/du (raw f64)
  kCutGrad = 5,           // server -> client: dl_S/dz at the cut (raw f64)
  kModelUpload = 6,       // client -> fed server: parameter blocks
  kModelDownload = 7,     // fed server -> client: parameter blocks
  kInferenceFeature = 8,  // client -> server: quantized z for fallback
  kInferenceLogits = 9,   // server -> client: quantized fallback logits
};

const char* msg_kind_name(MsgKind kind);
bool msg_kind_is_upload(MsgKind kind);  // true if client -> server

struct FeaturePairBody {
  int exit_depth = 0;   // K, depth of z_dagger
  int split_depth = 0;  // n(phi), depth of z_ddagger
  QuantizedTensor z_dagger;
  QuantizedTensor z_ddagger;
  std::vector<uint8_t> indicator;  // 1 iff same class, one bit per pair

  bool operator==(const FeaturePairBody&) const = default;
};

struct TaskFeatureBody {
  int depth = 0;
  QuantizedTensor z;
  bool operator==(const TaskFeatureBody&) const = default;
};

struct TaskLogitsBody {
  QuantizedTensor logits;
  bool operator==(const TaskLogitsBody&) const = default;
};

struct UpstreamGradBody {
  Tensor grad;
  bool operator==(const UpstreamGradBody&) const = default;
};

struct CutGradBody {
  Tensor grad;
  bool operator==(const CutGradBody&) const = default;
};

struct ModelUploadBody {
  std::vector<ParamBlock> blocks;  // prefix blocks then head
  bool operator==(const ModelUploadBody&) const = default;
};

struct ModelDownloadBody {
  std::vector<ParamBlock> blocks;
  bool operator==(const ModelDownloadBody&) const = default;
};

struct InferenceFeatureBody {
  int depth = 0;
  QuantizedTensor z;
  bool operator==(const InferenceFeatureBody&) const = default;
};

struct InferenceLogitsBody {
  QuantizedTensor logits;
  bool operator==(const InferenceLogitsBody&) const = default;
};

using Payload = std::variant<FeaturePairBody, TaskFeatureBody, TaskLogitsBody, UpstreamGradBody,
                             CutGradBody, ModelUploadBody, ModelDownloadBody, InferenceFeatureBody,
                             InferenceLogitsBody>;

struct WireMessage {
  MsgKind kind = MsgKind::kFeaturePair;
  uint32_t round = 0;
  uint32_t step = 0;
  uint32_t client = 0;
  Payload payload;

  bool operator==(const WireMessage&) const = default;
};

constexpr uint8_t kWireVersion = 1;

// Structured decode failure carrying the byte offset of the defect.
class DecodeError : public Error {
 public:
  DecodeError(size_t offset, const std::string& what)
      : Error("decode error at offset " + std::to_string(offset) + ": " + what),
        offset_(offset) {}
  size_t offset() const { return offset_; }

 private:
  size_t offset_;
};

// Frame: u32 length of everything after it, u8 version, u8 kind,
// u32 round, u32 step, u32 client, payload. All little-endian.
std::vector<uint8_t> encode(const WireMessage& msg);
// Strict: consumes the whole frame or throws DecodeError.
WireMessage decode(const std::vector<uint8_t>& frame);

// Per-(client, round, kind) message and byte counters.
class TrafficLedger {
 public:
  void record(const WireMessage& msg, size_t frame_bytes);
  // Adds another ledger's counters (order-independent).
  void merge(const TrafficLedger& other);

  uint64_t bytes_up(uint32_t round) const;
  uint64_t bytes_down(uint32_t round) const;
  uint64_t total_messages() const;
  uint64_t messages_of(MsgKind kind) const;

 private:
  struct Key {
    uint32_t client;
    uint32_t round;
    MsgKind kind;
    auto operator<=>(const Key&) const = default;
  };
  struct Counter {
    uint64_t messages = 0;
    uint64_t bytes = 0;
  };
  std::map<Key, Counter> counters_;
};

// Simulated hop: encode, account, optionally append to a transcript, decode.
// Every message that "crosses the boundary" goes through a Channel, so byte
// totals and transcripts are exact.
class Channel {
 public:
  WireMessage transfer(const WireMessage& msg);

  TrafficLedger& ledger() { return ledger_; }
  const TrafficLedger& ledger() const { return ledger_; }

  void start_recording() { recording_ = true; }
  bool recording() const { return recording_; }
  const std::vector<uint8_t>& transcript() const { return transcript_; }

  // Folds a worker-local channel into this one: counters merged, transcript
  // appended. Callers merge in a fixed order to keep transcripts stable.
  void absorb(Channel&& other);

 private:
  TrafficLedger ledger_;
  bool recording_ = false;
  std::vector<uint8_t> transcript_;
};

struct AuditViolation {
  uint64_t frame_index = 0;
  size_t offset = 0;  // byte offset of the frame in the transcript
  std::string reason;
};

struct AuditReport {
  std::map<MsgKind, uint64_t> counts;
  uint64_t frames = 0;
  std::vector<AuditViolation> violations;
  bool corrupt = false;
  size_t corrupt_offset = 0;
  std::string corrupt_reason;

  bool clean() const { return !corrupt && violations.empty(); }
};

// Scans a raw transcript (concatenated frames): parses every frame, verifies
// the schema holds (known kinds, {0,1} indicators, quantized feature
// payloads), and counts frames per kind. Unparseable framing marks the
// report corrupt; schema violations are listed individually.
AuditReport audit_privacy(const std::vector<uint8_t>& transcript);

}  // namespace hsfl
