#include "hsfl/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace hsfl {

namespace {

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, double v) {
  const uint32_t bits = std::bit_cast<uint32_t>(static_cast<float>(v));
  put_u32(out, bits);
}

void put_block(std::string& out, const ParamBlock& block, uint32_t depth) {
  put_u32(out, depth);
  put_u32(out, static_cast<uint32_t>(block.in_dim()));
  put_u32(out, static_cast<uint32_t>(block.out_dim()));
  for (double v : block.w.data) put_f32(out, v);
  for (double v : block.b.data) put_f32(out, v);
}

class FileReader {
 public:
  FileReader(const std::string& path, std::string bytes) : path_(path), bytes_(std::move(bytes)) {}

  uint8_t u8() {
    need(1, "byte");
    return static_cast<uint8_t>(bytes_[pos_++]);
  }
  uint32_t u32() {
    need(4, "u32");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<uint8_t>(bytes_[pos_ + static_cast<size_t>(i)]))
           << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string raw(size_t n) {
    need(n, "bytes");
    std::string out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  bool at_end() const { return pos_ == bytes_.size(); }
  const std::string& path() const { return path_; }

  [[noreturn]] void fail(const std::string& why) {
    throw Error(path_ + ": " + why + " (offset " + std::to_string(pos_) + ")");
  }

 private:
  void need(size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      fail(std::string("truncated while reading ") + what);
  }

  std::string path_;
  std::string bytes_;
  size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(const std::string& path, const std::vector<ClientState>& clients,
                      const ServerState& server) {
  std::string out;
  out += "HSFL";
  out.push_back(static_cast<char>(kCheckpointVersion));
  put_u32(out, static_cast<uint32_t>(clients.size() + 1));

  for (const ClientState& c : clients) {
    put_u32(out, static_cast<uint32_t>(c.id));
    put_u32(out, static_cast<uint32_t>(c.params.prefix.size() + 1));
    for (const ParamBlock& b : c.params.prefix)
      put_block(out, b, static_cast<uint32_t>(b.depth));
    put_block(out, c.params.head, 0);
  }
  put_u32(out, kServerEntityId);
  put_u32(out, static_cast<uint32_t>(server.trunk.size() + 1));
  for (const ParamBlock& b : server.trunk) put_block(out, b, static_cast<uint32_t>(b.depth));
  put_block(out, server.head, 0);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open checkpoint for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error("failed writing checkpoint: " + path);
}

std::vector<CheckpointEntity> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open checkpoint: " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  FileReader r(path, buf.str());

  if (r.raw(4) != "HSFL") throw Error(path + ": bad magic (not a checkpoint)");
  const uint8_t version = r.u8();
  if (version != kCheckpointVersion)
    throw Error(path + ": unsupported checkpoint version " + std::to_string(version));

  const uint32_t entity_count = r.u32();
  if (entity_count > 100000) r.fail("implausible entity count");
  std::vector<CheckpointEntity> entities;
  entities.reserve(entity_count);
  for (uint32_t e = 0; e < entity_count; ++e) {
    CheckpointEntity entity;
    entity.id = r.u32();
    const uint32_t block_count = r.u32();
    if (block_count > 100000) r.fail("implausible block count");
    for (uint32_t i = 0; i < block_count; ++i) {
      const uint32_t depth = r.u32();
      const uint32_t in = r.u32();
      const uint32_t out = r.u32();
      if (in == 0 || out == 0 || in > (1u << 16) || out > (1u << 16))
        r.fail("implausible block dims");
      ParamBlock block;
      block.depth = static_cast<int>(depth);
      block.w = Tensor::zeros({static_cast<int>(in), static_cast<int>(out)});
      for (double& v : block.w.data) v = static_cast<double>(r.f32());
      block.b = Tensor::zeros({static_cast<int>(out)});
      for (double& v : block.b.data) v = static_cast<double>(r.f32());
      entity.blocks.push_back(std::move(block));
    }
    entities.push_back(std::move(entity));
  }
  if (!r.at_end()) r.fail("trailing bytes after the last entity");
  return entities;
}

std::string describe_checkpoint(const std::vector<CheckpointEntity>& entities) {
  std::ostringstream out;
  out << "entities: " << entities.size() << '\n';
  for (const CheckpointEntity& e : entities) {
    if (e.id == kServerEntityId)
      out << "server";
    else
      out << "client " << e.id;
    size_t params = 0;
    std::string depths;
    for (const ParamBlock& b : e.blocks) {
      params += b.w.size() + b.b.size();
      if (!depths.empty()) depths += ',';
      depths += b.depth == 0 ? "head" : std::to_string(b.depth);
    }
    out << ": blocks [" << depths << "], " << params << " params\n";
  }
  return out.str();
}

}  // namespace hsfl
