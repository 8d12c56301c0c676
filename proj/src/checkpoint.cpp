#include <bit>
#include <cstring>

#include "alignforge/common.hpp"
#include "alignforge/tinylm.hpp"

namespace alignforge::tinylm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'A', 'F', 'G', 'C', 'K', 'P', 'T', '\0'};
constexpr std::size_t kDigestHexLen = 64;

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)).data(), sizeof(T));
    return value;
  }

  std::string_view take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw CheckpointError("corrupt checkpoint: truncated file");
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const LMParams& params) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  const auto& c = params.config;
  for (int v : {c.n_layers, c.n_heads, c.d_model, c.d_ff, c.context_len, c.vocab_size}) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  put<std::uint64_t>(out, c.init_seed);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.tensors().size()));
  params.for_each([&](const std::string& name, const Matrix& m) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    out.append(reinterpret_cast<const char*>(m.data()), sizeof(double) * m.size());
  });
  out += sha256_hex(out);
  return out;
}

LMParams deserialize_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.remaining() < sizeof(kMagic) || std::memcmp(r.take(sizeof(kMagic)).data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("corrupt checkpoint: bad magic");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  LMConfig cfg;
  cfg.n_layers = static_cast<int>(r.get<std::uint32_t>());
  cfg.n_heads = static_cast<int>(r.get<std::uint32_t>());
  cfg.d_model = static_cast<int>(r.get<std::uint32_t>());
  cfg.d_ff = static_cast<int>(r.get<std::uint32_t>());
  cfg.context_len = static_cast<int>(r.get<std::uint32_t>());
  cfg.vocab_size = static_cast<int>(r.get<std::uint32_t>());
  cfg.init_seed = r.get<std::uint64_t>();
  try {
    cfg.validate();
  } catch (const UsageError& e) {
    throw CheckpointError(std::string("corrupt checkpoint: invalid config: ") + e.what());
  }

  // Refuse to allocate for a config the remaining bytes cannot back.
  const double d = cfg.d_model, ff = cfg.d_ff, v = cfg.vocab_size;
  const double expected_values = v * d + cfg.context_len * d +
                                 cfg.n_layers * (4 * d * d + 8 * d + 2 * d * ff + ff) +
                                 2 * d + d * v + v;
  if (expected_values * sizeof(double) > static_cast<double>(r.remaining())) {
    throw CheckpointError("corrupt checkpoint: truncated file");
  }

  // Shape the container from the config, then fill it.
  LMParams params = zeros_like(init_params(cfg));
  const auto count = r.get<std::uint32_t>();
  if (count != params.tensors().size()) {
    throw CheckpointError("corrupt checkpoint: expected " + std::to_string(params.tensors().size()) +
                          " tensors, found " + std::to_string(count));
  }
  params.for_each([&](const std::string& name, Matrix& m) {
    const auto name_len = r.get<std::uint32_t>();
    const auto stored = r.take(name_len);
    if (stored != name) {
      throw CheckpointError("corrupt checkpoint: expected tensor '" + name + "', found '" +
                            std::string(stored) + "'");
    }
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    if (rows != m.rows() || cols != m.cols()) {
      throw CheckpointError("corrupt checkpoint: tensor '" + name + "' has wrong shape");
    }
    const auto raw = r.take(sizeof(double) * m.size());
    std::memcpy(m.data(), raw.data(), raw.size());
  });
  const std::size_t body_len = bytes.size() - r.remaining();
  const auto digest = r.take(kDigestHexLen);
  if (r.remaining() != 0) throw CheckpointError("corrupt checkpoint: trailing bytes");
  if (digest != sha256_hex(bytes.substr(0, body_len))) {
    throw CheckpointError("corrupt checkpoint: checksum mismatch");
  }
  return params;
}

void save_checkpoint(const LMParams& params, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(params));
}

LMParams load_checkpoint(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const DataError& e) {
    throw CheckpointError(e.what());
  }
  return deserialize_checkpoint(bytes);
}

}  // namespace alignforge::tinylm
