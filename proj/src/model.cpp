#include "retrograph/model.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "retrograph/error.hpp"

namespace retrograph {

void ModelConfig::validate() const {
  if (d <= 0 || d_k <= 0 || n_head <= 0) throw ConfigError("dimensions must be positive");
  if (d_k * n_head != d) {
    throw ConfigError("d (" + std::to_string(d) + ") must equal d_k * n_head (" + std::to_string(d_k) + " * " +
                      std::to_string(n_head) + ")");
  }
  if (layers < 0) throw ConfigError("layers must be >= 0");
  if (k_r < 0 || k_r > 8) throw ConfigError("k_r must be in [0, 8]");
  if (k_b < 0 || k_b > 6) throw ConfigError("k_b must be in [0, 6]");
  if (k < 1) throw ConfigError("k must be >= 1");
  if (vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
  if (max_gates < 1) throw ConfigError("max_gates must be >= 1");
  if (!(tau_contrastive > 0.0)) throw ConfigError("tau_contrastive must be positive");
}

std::string ModelConfig::to_text() const {
  std::ostringstream out;
  out.precision(17);
  out << "d=" << d << "\nd_k=" << d_k << "\nn_head=" << n_head << "\nlayers=" << layers << "\nk_r=" << k_r
      << "\nk_b=" << k_b << "\nk=" << k << "\nvocab_size=" << vocab_size << "\nmax_gates=" << max_gates
      << "\nseed=" << seed << "\ntype_known=" << type_known << "\nseparate_encoders=" << separate_encoders
      << "\nmask_local=" << mask_local << "\nmask_global=" << mask_global
      << "\nrcp_positive_only=" << rcp_positive_only << "\ntau_contrastive=" << tau_contrastive << "\n";
  return out.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("config line without '=': " + line);
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    try {
      if (key == "d") c.d = std::stoi(value);
      else if (key == "d_k") c.d_k = std::stoi(value);
      else if (key == "n_head") c.n_head = std::stoi(value);
      else if (key == "layers") c.layers = std::stoi(value);
      else if (key == "k_r") c.k_r = std::stoi(value);
      else if (key == "k_b") c.k_b = std::stoi(value);
      else if (key == "k") c.k = std::stoi(value);
      else if (key == "vocab_size") c.vocab_size = std::stoi(value);
      else if (key == "max_gates") c.max_gates = std::stoi(value);
      else if (key == "seed") c.seed = std::stoull(value);
      else if (key == "type_known") c.type_known = std::stoi(value) != 0;
      else if (key == "separate_encoders") c.separate_encoders = std::stoi(value) != 0;
      else if (key == "mask_local") c.mask_local = std::stoi(value) != 0;
      else if (key == "mask_global") c.mask_global = std::stoi(value) != 0;
      else if (key == "rcp_positive_only") c.rcp_positive_only = std::stoi(value) != 0;
      else if (key == "tau_contrastive") c.tau_contrastive = std::stod(value);
      else throw FormatError("unknown config key " + key);
    } catch (const std::invalid_argument&) {
      throw FormatError("bad config value for " + key);
    } catch (const std::out_of_range&) {
      throw FormatError("bad config value for " + key);
    }
  }
  return c;
}

const Eigen::MatrixXd& ModelParams::at(const std::string& name) const {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("missing parameter tensor " + name);
  return it->second;
}

Eigen::MatrixXd& ModelParams::at(const std::string& name) {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("missing parameter tensor " + name);
  return it->second;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += static_cast<std::size_t>(t.size());
  return n;
}

std::vector<std::string> encoder_prefixes(const ModelConfig& config) {
  if (config.separate_encoders) return {"enc_rcp", "enc_lgm", "enc_lgc"};
  return {"enc"};
}

void round_to_float(ModelParams& params) {
  for (auto& [name, t] : params.tensors) {
    t = t.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
  }
}

namespace {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Eigen::MatrixXd uniform(Eigen::Index rows, Eigen::Index cols, double a) {
    std::uniform_real_distribution<double> dist(-a, a);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = dist(rng_);
    return m;
  }
  Eigen::MatrixXd glorot(Eigen::Index rows, Eigen::Index cols) {
    return uniform(rows, cols, std::sqrt(6.0 / static_cast<double>(rows + cols)));
  }

 private:
  std::mt19937_64 rng_;
};

void init_encoder(const ModelConfig& c, const std::string& p, Initializer& init, ModelParams& out) {
  auto& t = out.tensors;
  const double embed = std::sqrt(3.0 / static_cast<double>(c.d));
  t[p + ".embed.element"] = init.uniform(kElementRows, c.d, embed);
  t[p + ".embed.charge"] = init.uniform(kChargeRows, c.d, embed);
  t[p + ".embed.hcount"] = init.uniform(kHydrogenRows, c.d, embed);
  t[p + ".embed.aromatic"] = init.uniform(2, c.d, embed);
  t[p + ".embed.ring"] = init.uniform(2, c.d, embed);
  t[p + ".embed.degree"] = init.uniform(kDegreeRows, c.d, embed);
  t[p + ".super"] = init.uniform(1, c.d, embed);
  if (c.type_known) t[p + ".type"] = init.uniform(kNumReactionTypes, c.d, embed);
  for (int s = 0; s < c.k_b; ++s) {
    for (int j = 1; j <= c.k_r; ++j) {
      t[p + ".bias.local.s" + std::to_string(s) + ".r" + std::to_string(j)] =
          init.uniform(kCountClip + 1, c.n_head, 0.1);
    }
  }
  Eigen::MatrixXd mean(1, c.n_head);
  Eigen::MatrixXd stdev(1, c.n_head);
  for (int h = 0; h < c.n_head; ++h) {
    const double frac = c.n_head > 1 ? static_cast<double>(h) / (c.n_head - 1) : 0.0;
    mean(0, h) = kDistInf * frac * frac;
    stdev(0, h) = 1.0 + mean(0, h) / 4.0;
  }
  t[p + ".bias.rbf_mean"] = mean;
  t[p + ".bias.rbf_std"] = stdev;
  t[p + ".bias.virtual"] = Eigen::MatrixXd::Zero(1, c.n_head);
  for (int l = 0; l < c.layers; ++l) {
    const std::string q = p + ".l" + std::to_string(l);
    t[q + ".ln1.g"] = Eigen::MatrixXd::Ones(1, c.d);
    t[q + ".ln1.b"] = Eigen::MatrixXd::Zero(1, c.d);
    t[q + ".wq"] = init.glorot(c.d, c.d);
    t[q + ".wk"] = init.glorot(c.d, c.d);
    t[q + ".wv"] = init.glorot(c.d, c.d);
    t[q + ".wo"] = init.glorot(c.d, c.d);
    t[q + ".bo"] = Eigen::MatrixXd::Zero(1, c.d);
    t[q + ".ln2.g"] = Eigen::MatrixXd::Ones(1, c.d);
    t[q + ".ln2.b"] = Eigen::MatrixXd::Zero(1, c.d);
    t[q + ".ff1.w"] = init.glorot(c.d, 4 * c.d);
    t[q + ".ff1.b"] = Eigen::MatrixXd::Zero(1, 4 * c.d);
    t[q + ".ff2.w"] = init.glorot(4 * c.d, c.d);
    t[q + ".ff2.b"] = Eigen::MatrixXd::Zero(1, c.d);
  }
  t[p + ".lnf.g"] = Eigen::MatrixXd::Ones(1, c.d);
  t[p + ".lnf.b"] = Eigen::MatrixXd::Zero(1, c.d);
}

}  // namespace

ModelParams init_params(const ModelConfig& config) {
  config.validate();
  ModelParams out;
  out.config = config;
  Initializer init(config.seed);
  for (const auto& p : encoder_prefixes(config)) init_encoder(config, p, init, out);
  auto& t = out.tensors;
  const int d = config.d;
  t["rcp.wq"] = init.glorot(d, d);
  t["rcp.wk"] = init.glorot(d, d);
  t["rcp.wbond"] = init.uniform(1, config.n_head, 1.0 / std::sqrt(config.n_head));
  t["rcp.bbond"] = Eigen::MatrixXd::Zero(1, 1);
  t["rcp.watom"] = init.glorot(d, config.hydrogen_classes());
  t["rcp.batom"] = Eigen::MatrixXd::Zero(1, config.hydrogen_classes());
  t["lgm.w"] = init.glorot(d, config.vocab_size);
  t["lgm.b"] = Eigen::MatrixXd::Zero(1, config.vocab_size);
  t["lgm.hcon"] = init.uniform(1, d, std::sqrt(3.0 / d));
  t["lgc.slot"] = init.uniform(config.max_gates, d, std::sqrt(3.0 / d));
  t["lgc.wg"] = init.glorot(2 * d, d);
  t["lgc.bg"] = Eigen::MatrixXd::Zero(1, d);
  t["lgc.wq"] = init.glorot(d, d);
  t["lgc.wk"] = init.glorot(d, d);
  t["lgc.wconn"] = init.uniform(1, config.n_head, 1.0 / std::sqrt(config.n_head));
  t["lgc.bconn"] = Eigen::MatrixXd::Zero(1, 1);
  round_to_float(out);
  return out;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw ChecksumError("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::string& bytes, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(n)));
}

constexpr char kMagic[4] = {'M', 'R', 'C', 'K'};

}  // namespace

std::string serialize_checkpoint(const ModelParams& params) {
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  const std::string cfg = params.config.to_text();
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  put_u32(out, static_cast<std::uint32_t>(params.task_weights.size()));
  for (double w : params.task_weights) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &w, sizeof bits);
    put_u64(out, bits);
  }
  put_u32(out, static_cast<std::uint32_t>(params.tensors.size()));
  for (const auto& [name, t] : params.tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, 2);
    put_u64(out, static_cast<std::uint64_t>(t.rows()));
    put_u64(out, static_cast<std::uint64_t>(t.cols()));
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.cols(); ++c) {
        const float f = static_cast<float>(t(r, c));
        std::uint32_t bits = 0;
        std::memcpy(&bits, &f, sizeof bits);
        put_u32(out, bits);
      }
    }
  }
  put_u32(out, crc_of(out, out.size()));
  return out;
}

ModelParams deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12) throw ChecksumError("checkpoint truncated");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not a checkpoint archive");
  const std::size_t body = bytes.size() - 4;
  Reader tail(bytes.substr(body), 4);
  if (tail.u32() != crc_of(bytes, body)) throw ChecksumError("checkpoint checksum mismatch");

  Reader in(bytes, body);
  in.str(4);
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  }
  ModelParams p;
  p.config = ModelConfig::from_text(in.str(in.u32()));
  const std::uint32_t nw = in.u32();
  for (std::uint32_t i = 0; i < nw; ++i) {
    const std::uint64_t bits = in.u64();
    double w = 0.0;
    std::memcpy(&w, &bits, sizeof w);
    p.task_weights.push_back(w);
  }
  const std::uint32_t n = in.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = in.str(in.u32());
    if (in.u32() != 2) throw FormatError("tensor " + name + " has unsupported rank");
    const auto rows = static_cast<Eigen::Index>(in.u64());
    const auto cols = static_cast<Eigen::Index>(in.u64());
    Eigen::MatrixXd t(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        const std::uint32_t bits = in.u32();
        float f = 0.0f;
        std::memcpy(&f, &bits, sizeof f);
        t(r, c) = static_cast<double>(f);
      }
    }
    p.tensors.emplace(name, std::move(t));
  }
  if (!in.done()) throw FormatError("trailing bytes in checkpoint");
  p.config.validate();
  return p;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  ModelParams p = deserialize_checkpoint(buf.str());
  if (expected && expected->k_r != p.config.k_r) {
    throw ConfigError("checkpoint was trained with k_r=" + std::to_string(p.config.k_r) + ", session uses k_r=" +
                      std::to_string(expected->k_r));
  }
  return p;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  save_checkpoint(model.params, path);
  model.vocab.save(path.string() + ".vocab");
}

Model load_model(const std::filesystem::path& path, const ModelConfig* expected) {
  Model m;
  m.params = load_checkpoint(path, expected);
  m.vocab = LeavingGroupVocab::load(path.string() + ".vocab");
  if (m.vocab.size() != m.params.config.vocab_size) {
    throw ConfigError("vocabulary size " + std::to_string(m.vocab.size()) + " does not match checkpoint (" +
                      std::to_string(m.params.config.vocab_size) + ")");
  }
  return m;
}

}  // namespace retrograph
