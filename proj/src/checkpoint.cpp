#include "attnwb/json_io.hpp"
#include "attnwb/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace attnwb::model {
namespace {

constexpr char kMagic[8] = {'A', 'T', 'W', 'B', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw Error("checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

// Allocates parameter arrays for a model whose config and PAL config are set.
void allocate(Model& m) {
  Model fresh = init_model(m.config, 0);
  m.params = std::move(fresh.params);
  if (m.pal) {
    const int d = m.config.d_model, p = m.pal->d_pal;
    m.params.pals.resize(static_cast<std::size_t>(m.config.n_layers));
    for (auto& A : m.params.pals) {
      A.down.resize(d, p);
      A.wq.resize(p, p);
      A.wk.resize(p, p);
      A.wv.resize(p, p);
      A.wo.resize(p, p);
      A.up.resize(p, d);
    }
  }
}

}  // namespace

std::string serialize(const Model& m) {
  json header;
  header["config"] = m.config;
  header["pal"] = m.pal ? json(*m.pal) : json(nullptr);
  header["assignments"] = m.assignments;
  json arrays = json::array();
  visit_params(m.params, [&](const std::string& name, const Mat& a) {
    arrays.push_back({{"name", name}, {"shape", {a.rows(), a.cols()}}});
  });
  header["arrays"] = arrays;
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  visit_params(m.params, [&](const std::string&, const Mat& a) {
    out.append(reinterpret_cast<const char*>(a.data()), static_cast<std::size_t>(a.size()) * sizeof(double));
  });
  return out;
}

Model deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw Error("not a checkpoint");
  std::size_t pos = sizeof(kMagic);
  const auto version = take<std::uint32_t>(bytes, pos);
  if (version != kVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  const auto len = take<std::uint64_t>(bytes, pos);
  if (pos + len > bytes.size()) throw Error("checkpoint truncated");
  json header;
  try {
    header = json::parse(bytes.substr(pos, len));
  } catch (const json::exception& e) {
    throw Error(std::string("checkpoint header: ") + e.what());
  }
  pos += len;

  Model m;
  m.config = header.at("config").get<ModelConfig>();
  m.config.validate();
  if (!header.at("pal").is_null()) {
    m.pal = header.at("pal").get<PalConfig>();
    m.pal->validate(m.config);
  }
  m.assignments = header.at("assignments").get<std::vector<HeadAssignment>>();
  allocate(m);
  m.validate_assignments();

  const auto& arrays = header.at("arrays");
  std::size_t index = 0;
  visit_params(m.params, [&](const std::string& name, Mat& a) {
    if (index >= arrays.size()) throw Error("checkpoint is missing array " + name);
    const auto& entry = arrays[index++];
    if (entry.at("name").get<std::string>() != name || entry.at("shape")[0].get<Eigen::Index>() != a.rows() ||
        entry.at("shape")[1].get<Eigen::Index>() != a.cols())
      throw Error("checkpoint array mismatch at " + name);
    const std::size_t n = static_cast<std::size_t>(a.size()) * sizeof(double);
    if (pos + n > bytes.size()) throw Error("checkpoint truncated");
    std::memcpy(a.data(), bytes.data() + pos, n);
    pos += n;
  });
  if (index != arrays.size() || pos != bytes.size()) throw Error("checkpoint has trailing data");
  return m;
}

void save_checkpoint(const Model& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  const std::string bytes = serialize(m);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("cannot write " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

}  // namespace attnwb::model
