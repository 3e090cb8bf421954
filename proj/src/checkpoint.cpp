#include "idol/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace idol {

namespace {

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  const std::string& path;

  void need(size_t n) const {
    if (pos + n > buf.size()) throw IoError("truncated checkpoint: " + path);
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

uint32_t payload_crc(const char* data, size_t len) {
  uLong crc = crc32(0L, Z_NULL, 0);
  return static_cast<uint32_t>(
      crc32(crc, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(len)));
}

}  // namespace

void save_checkpoint(const std::string& path, const ParameterStore<float>& params,
                     const nlohmann::json& manifest) {
  std::string out;
  out += "IDOLCKP1";
  put_u32(out, kCheckpointVersion);
  const std::string m = manifest.dump();
  put_u64(out, m.size());
  out += m;
  put_u32(out, static_cast<uint32_t>(params.count()));
  for (const auto& [name, t] : params.tensors()) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) put_u32(out, static_cast<uint32_t>(d));
    const uint64_t bytes = static_cast<uint64_t>(t.numel()) * 4;
    put_u64(out, bytes);
    const size_t start = out.size();
    out.resize(out.size() + bytes);
    for (int64_t i = 0; i < t.numel(); ++i) {
      const uint32_t u = std::bit_cast<uint32_t>(t.data[i]);
      for (int b = 0; b < 4; ++b)
        out[start + static_cast<size_t>(i) * 4 + b] =
            static_cast<char>((u >> (8 * b)) & 0xff);
    }
    put_u32(out, payload_crc(out.data() + start, bytes));
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open checkpoint for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f.flush()) throw IoError("checkpoint write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Reader r{buf, 0, path};
  if (r.bytes(8) != "IDOLCKP1") throw IoError("not a checkpoint file: " + path);
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " +
                  path + " (expected " + std::to_string(kCheckpointVersion) + ")");

  LoadedCheckpoint out;
  const uint64_t mlen = r.u64();
  const std::string mtext = r.bytes(mlen);
  try {
    out.manifest = nlohmann::json::parse(mtext);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint manifest in " + path + ": " + e.what());
  }

  const uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t nlen = r.u32();
    const std::string name = r.bytes(nlen);
    const uint32_t rank = r.u32();
    if (rank > 16) throw IoError("corrupt tensor rank for '" + name + "' in " + path);
    std::vector<int> shape(rank);
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      const uint32_t dim = r.u32();
      if (dim == 0 || dim > (1u << 30))
        throw IoError("corrupt dimension for tensor '" + name + "' in " + path);
      shape[d] = static_cast<int>(dim);
      numel *= shape[d];
    }
    const uint64_t bytes = r.u64();
    if (bytes != static_cast<uint64_t>(numel) * 4)
      throw IoError("length mismatch for tensor '" + name + "' in " + path);
    r.need(bytes);
    const char* payload = buf.data() + r.pos;
    const uint32_t stored_crc = [&] {
      Reader peek{buf, r.pos + bytes, path};
      return peek.u32();
    }();
    if (payload_crc(payload, bytes) != stored_crc)
      throw IoError("checksum mismatch for tensor '" + name + "' in " + path);

    TensorF t(shape);
    for (int64_t k = 0; k < numel; ++k) {
      uint32_t u = 0;
      for (int b = 0; b < 4; ++b)
        u |= static_cast<uint32_t>(
                 static_cast<unsigned char>(payload[static_cast<size_t>(k) * 4 + b]))
             << (8 * b);
      t.data[k] = std::bit_cast<float>(u);
    }
    r.pos += bytes + 4;
    if (!out.tensors.emplace(name, std::move(t)).second)
      throw IoError("duplicate tensor '" + name + "' in " + path);
  }
  if (r.pos != buf.size()) throw IoError("trailing bytes in checkpoint: " + path);
  return out;
}

ResumeReport restore_params(ParameterStore<float>& store,
                            const std::map<std::string, TensorF>& loaded,
                            uint64_t init_seed) {
  ResumeReport report;
  for (auto& [name, t] : store.tensors()) {
    const auto it = loaded.find(name);
    if (it == loaded.end()) {
      store.initialize_one_name(name, init_seed);
      report.fresh.push_back(name);
      continue;
    }
    if (it->second.shape != t.shape)
      throw PreconditionError("shape mismatch restoring '" + name + "'");
    t.data = it->second.data;
    report.restored.push_back(name);
  }
  for (const auto& [name, t] : loaded)
    if (!store.has(name)) report.unused.push_back(name);
  return report;
}

}  // namespace idol
