#include "hdseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

#include "hdseg/config.hpp"

namespace hdseg::net {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw Error("cannot open checkpoint for writing: " + path.string());
  }
  template <class T>
  void pod(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void finish(const std::filesystem::path& path) {
    out_.flush();
    if (!out_) throw Error("failed writing checkpoint " + path.string());
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw IngestionError("cannot open checkpoint: " + path.string());
  }
  template <class T>
  T pod() {
    T v{};
    read(&v, sizeof(T));
    return v;
  }
  void read(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw IngestionError("checkpoint truncated: " + path_.string());
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    if (n > (1u << 26)) throw IngestionError("checkpoint string length implausible");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

template <class T>
void write_tensor(Writer& w, const std::string& name, const std::vector<int>& dims, const std::vector<T>& v) {
  w.str(name);
  w.pod(static_cast<std::uint32_t>(dims.size()));
  for (int d : dims) w.pod(static_cast<std::int32_t>(d));
  w.pod(static_cast<std::uint64_t>(v.size()));
  w.bytes(v.data(), v.size() * sizeof(T));
}

template <class T>
void read_tensor(Reader& r, std::string& name, std::vector<int>& dims, std::vector<T>& v) {
  name = r.str();
  const auto rank = r.pod<std::uint32_t>();
  if (rank > 8) throw IngestionError("checkpoint tensor rank implausible");
  dims.resize(rank);
  std::size_t expect = 1;
  for (auto& d : dims) {
    d = r.pod<std::int32_t>();
    if (d < 0) throw IngestionError("checkpoint tensor has a negative dimension");
    expect *= static_cast<std::size_t>(d);
  }
  const auto count = r.pod<std::uint64_t>();
  if (count != expect) throw IngestionError("checkpoint tensor '" + name + "' size disagrees with its dims");
  v.resize(count);
  r.read(v.data(), count * sizeof(T));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Network& network, const losses::MIHead* mi_head,
                     const std::string& run_config) {
  Writer w(path);
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.pod(kCheckpointSchema);
  nlohmann::json meta;
  meta["network"] = config::to_json(network.config());
  if (mi_head) meta["mi_reduction"] = mi_head->reduction() == losses::MIReduction::mean ? "mean" : "sum";
  if (!run_config.empty()) meta["run_config"] = run_config;
  w.str(meta.dump());

  const auto& params = network.params().all();
  w.pod(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) write_tensor(w, p.name, p.dims, p.value);

  std::uint32_t extra = mi_head ? static_cast<std::uint32_t>(mi_head->levels() * 4) : 0u;
  w.pod(extra);
  if (mi_head) {
    for (std::size_t k = 0; k < mi_head->levels(); ++k) {
      const auto& lv = mi_head->level(k);
      const std::string base = "mi." + std::to_string(k);
      write_tensor(w, base + ".weight", {lv.channels, lv.channels}, lv.weight);
      write_tensor(w, base + ".bias", {lv.channels}, lv.bias);
      write_tensor(w, base + ".log_sigma", {lv.channels}, lv.log_sigma);
      write_tensor(w, base + ".gamma", {1}, std::vector<double>{lv.gamma});
    }
  }
  w.finish(path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.read(magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IngestionError("not a checkpoint (bad magic): " + path.string());
  }
  const auto schema = r.pod<std::uint32_t>();
  if (schema != kCheckpointSchema) {
    throw IngestionError("unsupported checkpoint schema " + std::to_string(schema) + " (expected " +
                         std::to_string(kCheckpointSchema) + ")");
  }
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const NetworkConfig cfg = config::network_from_json(meta.at("network"));

  nn::ParamStore store;
  const auto n = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name;
    std::vector<int> dims;
    std::vector<float> values;
    read_tensor(r, name, dims, values);
    const int idx = store.add(name, dims);
    store[idx].value = std::move(values);
  }
  Checkpoint out;
  out.run_config = meta.value("run_config", std::string());
  out.network = std::make_unique<Network>(cfg, std::move(store));

  const auto m = r.pod<std::uint32_t>();
  if (m > 0) {
    if (m % 4 != 0) throw IngestionError("checkpoint MI head section is malformed");
    std::vector<int> channels;
    std::vector<std::vector<std::vector<double>>> levels;
    for (std::uint32_t k = 0; k < m / 4; ++k) {
      std::vector<std::vector<double>> parts(4);
      std::vector<int> dims;
      std::string name;
      for (auto& part : parts) read_tensor(r, name, dims, part);
      channels.push_back(static_cast<int>(parts[1].size()));
      levels.push_back(std::move(parts));
    }
    const auto reduction =
        meta.value("mi_reduction", std::string("sum")) == "mean" ? losses::MIReduction::mean : losses::MIReduction::sum;
    losses::MIHead head(channels, reduction);
    for (std::size_t k = 0; k < levels.size(); ++k) {
      auto& lv = head.level(k);
      lv.weight = levels[k][0];
      lv.bias = levels[k][1];
      lv.log_sigma = levels[k][2];
      lv.gamma = levels[k][3].at(0);
    }
    out.mi_head = std::move(head);
  }
  return out;
}

}  // namespace hdseg::net
