#include "tnet/model.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tnet {

namespace {

constexpr char kMagic[8] = {'T', 'N', 'E', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt17(v[i]);
  return s;
}

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw DataError("checkpoint truncated");
  return v;
}

std::string get_string(std::istream& in) {
  const auto n = get<std::uint64_t>(in);
  if (n > (1ULL << 32)) throw DataError("checkpoint string too long");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw DataError("checkpoint truncated");
  return s;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad number for " + key + ": '" + v + "'");
  }
}

int to_int(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d != std::floor(d)) throw ConfigError(key + " must be an integer");
  return static_cast<int>(d);
}

std::vector<double> to_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_double(key, item));
  if (out.empty()) throw ConfigError(key + " is empty");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "True" || v == "1") return true;
  if (v == "false" || v == "False" || v == "0") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

}  // namespace

KeyValues config_to_key_values(const ModelConfig& c) {
  return {
      {"cutoff_lower", fmt17(c.cutoff_lower)},
      {"cutoff_upper", fmt17(c.cutoff_upper)},
      {"embedding_dimension", std::to_string(c.num_channels)},
      {"num_layers", std::to_string(c.num_layers)},
      {"num_rbf", std::to_string(c.num_rbf)},
      {"attribute_mode", std::string(to_string(c.attribute_mode))},
      {"lambda", join(c.lambda)},
      {"lambda_tilde", join(c.lambda_tilde)},
      {"lambdas_learnable", c.lambdas_learnable ? "true" : "false"},
  };
}

ModelConfig config_from_key_values(const KeyValues& kv) {
  ModelConfig c;
  std::vector<double> lam{0.1}, lam_t{0.1};
  for (const auto& [k, v] : kv) {
    if (k == "cutoff_lower") c.cutoff_lower = to_double(k, v);
    else if (k == "cutoff_upper") c.cutoff_upper = to_double(k, v);
    else if (k == "embedding_dimension") c.num_channels = to_int(k, v);
    else if (k == "num_layers") c.num_layers = to_int(k, v);
    else if (k == "num_rbf") c.num_rbf = to_int(k, v);
    else if (k == "attribute_mode") c.attribute_mode = parse_attribute_mode(v);
    else if (k == "lambda") lam = to_list(k, v);
    else if (k == "lambda_tilde") lam_t = to_list(k, v);
    else if (k == "lambdas_learnable") c.lambdas_learnable = to_bool(k, v);
    else throw ConfigError("unknown model key '" + k + "'");
  }
  const auto layers = static_cast<std::size_t>(std::max(c.num_layers, 1));
  if (lam.size() == 1) lam.assign(layers, lam[0]);
  if (lam_t.size() == 1) lam_t.assign(layers, lam_t[0]);
  c.lambda = lam;
  c.lambda_tilde = lam_t;
  c.validate();
  return c;
}

void write_model(std::ostream& out, const Model& model, const std::string& trailer) {
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kVersion);
  std::string cfg;
  for (const auto& [k, v] : config_to_key_values(model.config)) cfg += k + ' ' + v + '\n';
  put_string(out, cfg);

  std::uint64_t count = 0;
  model.params.for_each([&](const std::string&, const ad::Array&) { ++count; });
  put<std::uint64_t>(out, count);
  model.params.for_each([&](const std::string& name, const ad::Array& a) {
    put_string(out, name);
    put<std::int64_t>(out, a.rows());
    put<std::int64_t>(out, a.cols());
    out.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(double)));
  });

  put<std::uint64_t>(out, model.reference.size());
  for (const auto& [z, e] : model.reference) {
    put<std::int32_t>(out, z);
    put<double>(out, e);
  }
  put<std::uint64_t>(out, model.trained_elements.size());
  for (int z : model.trained_elements) put<std::int32_t>(out, z);
  put_string(out, trailer);
  if (!out) throw DataError("checkpoint write failed");
}

Model read_model(std::istream& in, std::string* trailer) {
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw DataError("not a model checkpoint");
  const auto version = get<std::uint32_t>(in);
  if (version != kVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));

  Model m;
  m.config = config_from_key_values(parse_key_values(get_string(in)));
  m.params = init_params(m.config, 0);
  const auto count = get<std::uint64_t>(in);
  std::uint64_t expected = 0;
  m.params.for_each([&](const std::string&, const ad::Array&) { ++expected; });
  if (count != expected) throw DataError("checkpoint parameter count does not match its config");
  m.params.for_each([&](const std::string& name, ad::Array& a) {
    const std::string got = get_string(in);
    const auto rows = get<std::int64_t>(in), cols = get<std::int64_t>(in);
    if (got != name || rows != a.rows() || cols != a.cols())
      throw DataError("checkpoint parameter '" + got + "' does not match expected '" + name + "'");
    in.read(reinterpret_cast<char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(double)));
    if (!in) throw DataError("checkpoint truncated");
  });

  const auto nref = get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < nref; ++i) {
    const int z = get<std::int32_t>(in);
    m.reference[z] = get<double>(in);
  }
  const auto nel = get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < nel; ++i) m.trained_elements.insert(get<std::int32_t>(in));
  std::string tail = get_string(in);
  if (trailer) *trailer = std::move(tail);
  return m;
}

void save_model(const std::string& path, const Model& model, const std::string& trailer) {
  // Write-then-rename so an interrupted run never leaves a torn checkpoint.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + tmp);
    write_model(out, model, trailer);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw DataError("cannot rename " + tmp + " to " + path);
}

Model load_model(const std::string& path, std::string* trailer) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return read_model(in, trailer);
}

}  // namespace tnet
