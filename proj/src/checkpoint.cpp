#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "bayesbeat/kvconfig.hpp"
#include "bayesbeat/network.hpp"

namespace bayesbeat {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'B', 'B', 'K', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kMaxRank = 8;

class Writer {
 public:
  template <class U>
  void pod(U v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(std::string_view s) {
    pod(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  void tensor(const std::string& name, const Tensor& t) {
    str(name);
    str("f32");
    pod(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) pod(static_cast<std::uint64_t>(d));
    buf_.append(reinterpret_cast<const char*>(t.ptr()), t.size() * sizeof(float));
  }
  std::string finish() {
    const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(buf_.data()), static_cast<uInt>(buf_.size()));
    pod(static_cast<std::uint32_t>(crc));
    return std::move(buf_);
  }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class U>
  U pod(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string str(const char* what) {
    const auto n = pod<std::uint32_t>(what);
    need(n, what);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::pair<std::string, Tensor> tensor(std::size_t index) {
    const std::string where = "record " + std::to_string(index);
    std::string name = str(where.c_str());
    const std::string dtype = str(where.c_str());
    if (dtype != "f32") throw CheckpointError(where + " ('" + name + "'): unsupported dtype '" + dtype + "'");
    const auto rank = pod<std::uint32_t>(where.c_str());
    if (rank > kMaxRank) throw CheckpointError(where + " ('" + name + "'): implausible rank " + std::to_string(rank));
    Shape shape;
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = pod<std::uint64_t>(where.c_str());
      if (d > (std::size_t{1} << 32)) throw CheckpointError(where + " ('" + name + "'): implausible dimension");
      shape.push_back(static_cast<std::size_t>(d));
      count *= shape.back();
    }
    need(count * sizeof(float), where.c_str());
    std::vector<float> data(count);
    std::memcpy(data.data(), bytes_.data() + pos_, count * sizeof(float));
    pos_ += count * sizeof(float);
    return {std::move(name), Tensor(std::move(shape), std::move(data))};
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::string running_name(std::size_t i, const char* which) {
  return "norm" + std::to_string(i) + "." + which;
}

}  // namespace

std::string encode_checkpoint(const Network& net, const CheckpointMeta& meta) {
  std::ostringstream header;
  header << "seed=" << net.seed() << '\n';
  for (const auto& line : split(net.config().to_text(), '\n'))
    if (!line.empty()) header << "net." << line << '\n';
  for (const auto& [k, v] : meta.values) {
    if (k.find_first_of("=\n#") != std::string::npos || v.find_first_of("\n#") != std::string::npos)
      throw CheckpointError("checkpoint meta key/value contains a reserved character: '" + k + "'");
    header << "meta." << k << '=' << v << '\n';
  }

  Writer w;
  w.buffer().append(kMagic, 4);
  w.pod(kVersion);
  w.str(header.str());
  const auto& params = net.params();
  const auto& norms = net.norm_states();
  w.pod(static_cast<std::uint32_t>(params.size() + 2 * norms.size()));
  for (const auto& p : params) w.tensor(p.name, p.value);
  for (std::size_t i = 0; i < norms.size(); ++i) {
    w.tensor(running_name(i, "running_mean"), norms[i].running_mean);
    w.tensor(running_name(i, "running_var"), norms[i].running_var);
  }
  return w.finish();
}

Network decode_checkpoint(std::string_view bytes, CheckpointMeta* meta) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  const auto body = bytes.substr(0, bytes.size() - 4);
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
  if (static_cast<std::uint32_t>(crc) != stored_crc) throw CheckpointError("checkpoint CRC mismatch (file corrupt)");

  Reader r(body.substr(4));
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  auto kv = parse_kv_text(r.str("header"));
  const auto net_kv = take_prefixed(kv, "net");
  auto meta_kv = take_prefixed(kv, "meta");
  const auto seed_it = kv.find("seed");
  if (seed_it == kv.end()) throw CheckpointError("checkpoint header lacks a seed");
  const std::uint64_t seed = parse_u64(seed_it->second, "seed");
  NetworkConfig config;
  config.apply(net_kv);

  const auto count = r.pod<std::uint32_t>("record count");
  std::vector<std::pair<std::string, Tensor>> records;
  for (std::uint32_t i = 0; i < count; ++i) records.push_back(r.tensor(i));
  if (r.remaining() != 0) throw CheckpointError("trailing bytes after the last record");

  Network skeleton = Network::build(config, seed);
  const std::size_t n_params = skeleton.params().size();
  const std::size_t n_norms = skeleton.norm_states().size();
  if (records.size() != n_params + 2 * n_norms)
    throw CheckpointError("expected " + std::to_string(n_params + 2 * n_norms) + " records, found " +
                          std::to_string(records.size()));
  std::vector<Network::Param> params;
  for (std::size_t i = 0; i < n_params; ++i)
    params.push_back({records[i].first, skeleton.params()[i].kind, std::move(records[i].second)});
  std::vector<BatchNormState<float>> norms;
  for (std::size_t i = 0; i < n_norms; ++i) {
    auto& m = records[n_params + 2 * i];
    auto& v = records[n_params + 2 * i + 1];
    if (m.first != running_name(i, "running_mean") || v.first != running_name(i, "running_var"))
      throw CheckpointError("record " + std::to_string(n_params + 2 * i) + ": unexpected name '" + m.first + "'");
    BatchNormState<float> st = skeleton.norm_states()[i];
    st.running_mean = std::move(m.second);
    st.running_var = std::move(v.second);
    norms.push_back(std::move(st));
  }
  try {
    auto net = Network::from_parts(config, seed, std::move(params), std::move(norms));
    if (meta) meta->values = std::move(meta_kv);
    return net;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint does not match its config: ") + e.what());
  }
}

void save_checkpoint(const Network& net, const std::filesystem::path& path, const CheckpointMeta& meta) {
  const std::string bytes = encode_checkpoint(net, meta);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Network load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str(), meta);
}

}  // namespace bayesbeat
