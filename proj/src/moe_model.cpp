#include "voicemoe/moe_model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "voicemoe/hash.hpp"
#include "voicemoe/rng.hpp"

namespace voicemoe::moe {

using ad::Shape;
using ad::Tape;
using ad::Tensor;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

void validate(const MoeModelConfig& cfg) {
  if (cfg.n_features < 1) throw ConfigError("model: n_features must be >= 1");
  if (cfg.d_model < 1) throw ConfigError("model: d_model must be >= 1");
  if (cfg.n_experts < 1) throw ConfigError("model: n_experts must be >= 1");
  if (cfg.n_heads < 1) throw ConfigError("model: n_heads must be >= 1");
  if (cfg.d_model % cfg.n_heads != 0) {
    throw ConfigError("model: d_model " + std::to_string(cfg.d_model) +
                      " not divisible by n_heads " + std::to_string(cfg.n_heads));
  }
  if (cfg.ff_dim < 1) throw ConfigError("model: ff_dim must be >= 1");
  if (cfg.n_classes != 2) throw ConfigError("model: n_classes must be 2");
}

namespace {

// Glorot uniform: U(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
Tensor glorot(Rng& rng, Shape shape) {
  const double fan_in = static_cast<double>(shape[0]);
  const double fan_out = static_cast<double>(shape.size() > 1 ? shape[1] : 1);
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.mutable_data()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

Tensor MoeModel::add_param(const std::string& name, Shape shape, Tensor init) {
  if (init.shape() != shape) throw ShapeError("parameter " + name + " has wrong shape");
  params_.push_back(init);
  names_.push_back(name);
  return init;
}

MoeModel::MoeModel(const MoeModelConfig& cfg) : cfg_(cfg) {
  validate(cfg);
  Rng rng(cfg.seed);
  const std::int64_t f = cfg.n_features, d = cfg.d_model, ff = cfg.ff_dim, c = cfg.n_classes;

  embed_scale_ = add_param("embed.scale", {f, d}, glorot(rng, {f, d}));
  embed_shift_ = add_param("embed.shift", {f, d}, glorot(rng, {f, d}));
  embed_pos_ = add_param("embed.pos", {f, d}, glorot(rng, {f, d}));

  experts_.reserve(static_cast<std::size_t>(cfg.n_experts));
  for (std::int64_t e = 0; e < cfg.n_experts; ++e) {
    const std::string p = "expert" + std::to_string(e) + ".";
    Expert ex;
    ex.ln1_gain = add_param(p + "ln1.gain", {d}, Tensor::full({d}, 1.0, true));
    ex.ln1_bias = add_param(p + "ln1.bias", {d}, Tensor::zeros({d}, true));
    ex.wq = add_param(p + "attn.wq", {d, d}, glorot(rng, {d, d}));
    ex.bq = add_param(p + "attn.bq", {d}, Tensor::zeros({d}, true));
    ex.wk = add_param(p + "attn.wk", {d, d}, glorot(rng, {d, d}));
    ex.bk = add_param(p + "attn.bk", {d}, Tensor::zeros({d}, true));
    ex.wv = add_param(p + "attn.wv", {d, d}, glorot(rng, {d, d}));
    ex.bv = add_param(p + "attn.bv", {d}, Tensor::zeros({d}, true));
    ex.wo = add_param(p + "attn.wo", {d, d}, glorot(rng, {d, d}));
    ex.bo = add_param(p + "attn.bo", {d}, Tensor::zeros({d}, true));
    ex.ln2_gain = add_param(p + "ln2.gain", {d}, Tensor::full({d}, 1.0, true));
    ex.ln2_bias = add_param(p + "ln2.bias", {d}, Tensor::zeros({d}, true));
    ex.w1 = add_param(p + "ff.w1", {d, ff}, glorot(rng, {d, ff}));
    ex.b1 = add_param(p + "ff.b1", {ff}, Tensor::zeros({ff}, true));
    ex.w2 = add_param(p + "ff.w2", {ff, d}, glorot(rng, {ff, d}));
    ex.b2 = add_param(p + "ff.b2", {d}, Tensor::zeros({d}, true));
    experts_.push_back(std::move(ex));
  }

  gate_w_ = add_param("gate.w", {d, cfg.n_experts}, glorot(rng, {d, cfg.n_experts}));
  gate_b_ = add_param("gate.b", {cfg.n_experts}, Tensor::zeros({cfg.n_experts}, true));
  head_w_ = add_param("head.w", {d, c}, glorot(rng, {d, c}));
  head_b_ = add_param("head.b", {c}, Tensor::zeros({c}, true));
}

Tensor MoeModel::forward(Tape& tape, const Tensor& x) const {
  if (x.shape().size() != 2 || x.dim(1) != cfg_.n_features) {
    throw ShapeError("forward: expected [batch," + std::to_string(cfg_.n_features) +
                     "] features, got " + ad::shape_str(x.shape()));
  }
  const std::int64_t b = x.dim(0);
  const std::int64_t f = cfg_.n_features, d = cfg_.d_model, h = cfg_.n_heads;
  const std::int64_t e_count = cfg_.n_experts;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(d / h));

  // (1) tokens: one per feature.
  Tensor tokens = tape.embed_tokens(x, embed_scale_, embed_shift_, embed_pos_);  // [B,F,d]
  // Gate input is the mean embedded token, computed before any expert runs.
  Tensor gate_in = tape.mean_axis1(tokens);  // [B,d]

  // (2) experts: one pre-norm encoder layer each, mean-pooled over tokens.
  std::vector<Tensor> expert_out;
  expert_out.reserve(static_cast<std::size_t>(e_count));
  for (const Expert& ex : experts_) {
    Tensor res = tokens;  // [B,F,d]
    Tensor n1 = tape.layer_norm(res, ex.ln1_gain, ex.ln1_bias, kLayerNormEps);
    Tensor flat = tape.reshape(n1, {b * f, d});
    Tensor q = tape.add_rowvec(tape.matmul(flat, ex.wq), ex.bq);
    Tensor k = tape.add_rowvec(tape.matmul(flat, ex.wk), ex.bk);
    Tensor v = tape.add_rowvec(tape.matmul(flat, ex.wv), ex.bv);
    Tensor qh = tape.split_heads(q, b, f, h);  // [B*H,F,dh]
    Tensor kh = tape.split_heads(k, b, f, h);
    Tensor vh = tape.split_heads(v, b, f, h);
    Tensor scores = tape.mul_scalar(tape.bmm_nt(qh, kh), attn_scale);  // [B*H,F,F]
    Tensor weights = tape.softmax(scores);
    Tensor ctx = tape.bmm_nn(weights, vh);                      // [B*H,F,dh]
    Tensor merged = tape.merge_heads(ctx, b, f, h);             // [B*F,d]
    Tensor proj = tape.add_rowvec(tape.matmul(merged, ex.wo), ex.bo);
    res = tape.add(res, tape.reshape(proj, {b, f, d}));         // attention residual

    Tensor n2 = tape.layer_norm(res, ex.ln2_gain, ex.ln2_bias, kLayerNormEps);
    Tensor flat2 = tape.reshape(n2, {b * f, d});
    Tensor hidden = tape.relu(tape.add_rowvec(tape.matmul(flat2, ex.w1), ex.b1));
    Tensor ffout = tape.add_rowvec(tape.matmul(hidden, ex.w2), ex.b2);
    res = tape.add(res, tape.reshape(ffout, {b, f, d}));        // feed-forward residual

    expert_out.push_back(tape.mean_axis1(res));                 // [B,d]
  }

  // (3)+(4) gate and fuse.
  Tensor fused;
  if (cfg_.use_gating) {
    Tensor gate_logits = tape.add_rowvec(tape.matmul(gate_in, gate_w_), gate_b_);  // [B,E]
    Tensor gate = tape.softmax(gate_logits);
    for (std::int64_t e = 0; e < e_count; ++e) {
      Tensor weighted = tape.scale_rows(expert_out[static_cast<std::size_t>(e)],
                                        tape.select_column(gate, e));
      fused = e == 0 ? weighted : tape.add(fused, weighted);
    }
  } else {
    for (std::int64_t e = 0; e < e_count; ++e) {
      fused = e == 0 ? expert_out[0] : tape.add(fused, expert_out[static_cast<std::size_t>(e)]);
    }
    fused = tape.mul_scalar(fused, 1.0 / static_cast<double>(e_count));
  }

  // (5) classifier head.
  return tape.add_rowvec(tape.matmul(fused, head_w_), head_b_);
}

Tensor MoeModel::predict_proba(Tape& tape, const Tensor& x) const {
  return tape.softmax(forward(tape, x));
}

std::int64_t MoeModel::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

std::vector<std::vector<double>> MoeModel::state() const {
  std::vector<std::vector<double>> s;
  s.reserve(params_.size());
  for (const auto& p : params_) s.emplace_back(p.data().begin(), p.data().end());
  return s;
}

void MoeModel::load_state(const std::vector<std::vector<double>>& state) {
  if (state.size() != params_.size()) {
    throw ShapeError("load_state: expected " + std::to_string(params_.size()) +
                     " parameter buffers, got " + std::to_string(state.size()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto dst = params_[i].mutable_data();
    if (state[i].size() != dst.size()) {
      throw ShapeError("load_state: size mismatch for " + names_[i]);
    }
    std::copy(state[i].begin(), state[i].end(), dst.begin());
  }
}

void MoeModel::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void MoeModel::set_requires_grad(bool value) {
  for (auto& p : params_) p.set_requires_grad(value);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json config_to_json(const MoeModelConfig& cfg) {
  return json{{"n_features", cfg.n_features}, {"d_model", cfg.d_model},
              {"n_experts", cfg.n_experts},   {"n_heads", cfg.n_heads},
              {"ff_dim", cfg.ff_dim},         {"n_classes", cfg.n_classes},
              {"use_gating", cfg.use_gating}, {"seed", cfg.seed}};
}

MoeModelConfig config_from_json(const json& j) {
  MoeModelConfig cfg;
  cfg.n_features = j.at("n_features").get<std::int64_t>();
  cfg.d_model = j.at("d_model").get<std::int64_t>();
  cfg.n_experts = j.at("n_experts").get<std::int64_t>();
  cfg.n_heads = j.at("n_heads").get<std::int64_t>();
  cfg.ff_dim = j.at("ff_dim").get<std::int64_t>();
  cfg.n_classes = j.at("n_classes").get<std::int64_t>();
  cfg.use_gating = j.at("use_gating").get<bool>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

}  // namespace

void save_checkpoint(const MoeModel& model, const std::filesystem::path& dir,
                     const std::optional<data::StandardizationParams>& standardization) {
  std::filesystem::create_directories(dir);

  json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["config"] = config_to_json(model.config());

  std::vector<std::byte> blob;
  json params = json::array();
  const auto& tensors = model.parameters();
  const auto& names = model.parameter_names();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto data = tensors[i].data();
    const std::size_t bytes = data.size() * sizeof(double);
    const std::size_t pos = blob.size();
    blob.resize(pos + bytes);
    std::memcpy(blob.data() + pos, data.data(), bytes);
    params.push_back(json{{"name", names[i]},
                          {"shape", tensors[i].shape()},
                          {"offset", offset}});
    offset += bytes;
  }
  manifest["params"] = params;
  manifest["weights_bytes"] = blob.size();
  Fnv1a64 hash;
  hash.update(blob.data(), blob.size());
  manifest["weights_fnv1a64"] = hash.hex();
  if (standardization) {
    manifest["standardization"] = {
        {"mean", standardization->mean},
        {"std", standardization->stddev},
    };
  }

  {
    std::ofstream out(dir / "weights.bin", std::ios::binary);
    if (!out) throw Error("save_checkpoint: cannot write " + (dir / "weights.bin").string());
    out.write(reinterpret_cast<const char*>(blob.data()),
              static_cast<std::streamsize>(blob.size()));
    if (!out) throw Error("save_checkpoint: short write to weights.bin");
  }
  {
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    if (!out) throw Error("save_checkpoint: cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << "\n";
  }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw ConfigError("load_checkpoint: cannot open " + manifest_path.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw ParseError(manifest_path.string() + ": " + e.what());
  }

  const auto version = manifest.at("format_version").get<int>();
  if (version != kCheckpointFormatVersion) {
    throw VersionError("load_checkpoint: unsupported format_version " + std::to_string(version));
  }

  MoeModel model(config_from_json(manifest.at("config")));

  std::vector<std::byte> blob;
  {
    std::ifstream wf(dir / "weights.bin", std::ios::binary | std::ios::ate);
    if (!wf) throw ConfigError("load_checkpoint: cannot open " + (dir / "weights.bin").string());
    blob.resize(static_cast<std::size_t>(wf.tellg()));
    wf.seekg(0);
    wf.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!wf) throw CheckpointError("load_checkpoint: short read from weights.bin");
  }

  const auto expected_bytes = manifest.at("weights_bytes").get<std::uint64_t>();
  if (blob.size() != expected_bytes) {
    throw CheckpointError("load_checkpoint: weights.bin is " + std::to_string(blob.size()) +
                          " bytes, manifest says " + std::to_string(expected_bytes));
  }
  Fnv1a64 hash;
  hash.update(blob.data(), blob.size());
  if (hash.hex() != manifest.at("weights_fnv1a64").get<std::string>()) {
    throw CheckpointError("load_checkpoint: weights checksum mismatch");
  }

  const auto& params = manifest.at("params");
  const auto& tensors = model.parameters();
  const auto& names = model.parameter_names();
  if (params.size() != tensors.size()) {
    throw CheckpointError("load_checkpoint: manifest lists " + std::to_string(params.size()) +
                          " parameters, model has " + std::to_string(tensors.size()));
  }
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& entry = params[i];
    if (entry.at("name").get<std::string>() != names[i]) {
      throw CheckpointError("load_checkpoint: parameter " + std::to_string(i) + " is '" +
                            entry.at("name").get<std::string>() + "', expected '" + names[i] + "'");
    }
    const auto shape = entry.at("shape").get<ad::Shape>();
    if (shape != tensors[i].shape()) {
      throw CheckpointError("load_checkpoint: shape mismatch for " + names[i]);
    }
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const std::size_t bytes = static_cast<std::size_t>(tensors[i].numel()) * sizeof(double);
    if (offset + bytes > blob.size()) {
      throw CheckpointError("load_checkpoint: " + names[i] + " extends past weights.bin");
    }
    auto dst = model.parameters()[i].mutable_data();
    std::memcpy(dst.data(), blob.data() + offset, bytes);
    total += bytes;
  }
  if (total != blob.size()) {
    throw CheckpointError("load_checkpoint: weights.bin has trailing bytes");
  }

  LoadedCheckpoint loaded{std::move(model), {}};
  if (manifest.contains("standardization")) {
    data::StandardizationParams p;
    const auto& s = manifest.at("standardization");
    const auto mean = s.at("mean").get<std::vector<double>>();
    const auto stddev = s.at("std").get<std::vector<double>>();
    if (mean.size() != p.mean.size() || stddev.size() != p.stddev.size()) {
      throw CheckpointError("load_checkpoint: standardization block has wrong arity");
    }
    std::copy(mean.begin(), mean.end(), p.mean.begin());
    std::copy(stddev.begin(), stddev.end(), p.stddev.begin());
    loaded.standardization = p;
  }
  return loaded;
}

}  // namespace voicemoe::moe
