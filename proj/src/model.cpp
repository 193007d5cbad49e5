#include "kinedec/model.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"
#include "kinedec/checkpoint.hpp"

namespace kinedec::model {

using tensor::Shape;
using nlohmann::json;

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };

  if (in_channels_eeg < 1) fail("in_channels_eeg must be at least 1");
  if (in_channels_emg < 0) fail("in_channels_emg must not be negative");
  if (large_kernel < 1 || large_kernel % 2 == 0) fail("large_kernel must be odd and positive");
  if (window_samples < large_kernel) {
    fail("window_samples (" + std::to_string(window_samples) + ") is shorter than large_kernel (" +
         std::to_string(large_kernel) + ")");
  }
  if (branch_kernels.empty()) fail("branch_kernels must not be empty");
  for (int64_t k : branch_kernels) {
    if (k < 1 || k % 2 == 0) fail("branch kernels must be odd and positive");
  }
  if (branch_features < 1) fail("branch_features must be at least 1");
  if (pool_k < 1 || pool_s < 1) fail("pool_k and pool_s must be at least 1");
  if (window_samples < pool_k) fail("pool_k exceeds the window");
  if (se_reduction < 1 || in_channels_eeg % se_reduction != 0) {
    fail("se_reduction must divide in_channels_eeg");
  }
  if (in_channels_emg > 0 &&
      (se_reduction_emg < 1 || in_channels_emg % se_reduction_emg != 0)) {
    fail("se_reduction_emg must divide in_channels_emg");
  }
  if (embed_dim < 2 || embed_dim % 2 != 0) fail("embed_dim must be even and at least 2");
  if (heads < 1 || head_dim < 1) fail("heads and head_dim must be at least 1");
  if (embed_dim != heads * head_dim) {
    fail("embed_dim (" + std::to_string(embed_dim) + ") must equal heads*head_dim (" +
         std::to_string(heads * head_dim) + ")");
  }
  if (out_dim != 6 && out_dim != 5) fail("out_dim must be 6 (regression) or 5 (states)");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
}

std::string config_to_json(const ModelConfig& cfg) {
  json j;
  j["in_channels_eeg"] = cfg.in_channels_eeg;
  j["in_channels_emg"] = cfg.in_channels_emg;
  j["window_samples"] = cfg.window_samples;
  j["large_kernel"] = cfg.large_kernel;
  j["branch_kernels"] = cfg.branch_kernels;
  j["branch_features"] = cfg.branch_features;
  j["pool_k"] = cfg.pool_k;
  j["pool_s"] = cfg.pool_s;
  j["se_reduction"] = cfg.se_reduction;
  j["se_reduction_emg"] = cfg.se_reduction_emg;
  j["embed_dim"] = cfg.embed_dim;
  j["heads"] = cfg.heads;
  j["head_dim"] = cfg.head_dim;
  j["out_dim"] = cfg.out_dim;
  j["dropout"] = cfg.dropout;
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("model config: bad JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("model config: expected a JSON object");

  ModelConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (key == "in_channels_eeg") cfg.in_channels_eeg = value.get<int64_t>();
    else if (key == "in_channels_emg") cfg.in_channels_emg = value.get<int64_t>();
    else if (key == "window_samples") cfg.window_samples = value.get<int64_t>();
    else if (key == "large_kernel") cfg.large_kernel = value.get<int64_t>();
    else if (key == "branch_kernels") cfg.branch_kernels = value.get<std::vector<int64_t>>();
    else if (key == "branch_features") cfg.branch_features = value.get<int64_t>();
    else if (key == "pool_k") cfg.pool_k = value.get<int64_t>();
    else if (key == "pool_s") cfg.pool_s = value.get<int64_t>();
    else if (key == "se_reduction") cfg.se_reduction = value.get<int64_t>();
    else if (key == "se_reduction_emg") cfg.se_reduction_emg = value.get<int64_t>();
    else if (key == "embed_dim") cfg.embed_dim = value.get<int64_t>();
    else if (key == "heads") cfg.heads = value.get<int64_t>();
    else if (key == "head_dim") cfg.head_dim = value.get<int64_t>();
    else if (key == "out_dim") cfg.out_dim = value.get<int64_t>();
    else if (key == "dropout") cfg.dropout = value.get<double>();
    else throw std::invalid_argument("model config: unknown key '" + key + "'");
  }
  return cfg;
}

namespace {

using tensor::add;
using tensor::avg_pool1d;
using tensor::bias_axis;
using tensor::concat;
using tensor::conv1d;
using tensor::dense;
using tensor::elu;
using tensor::layer_norm;
using tensor::matmul;
using tensor::mean_over_axis;
using tensor::mul;
using tensor::relu;
using tensor::reshape;
using tensor::scale;
using tensor::scale_channels;
using tensor::sigmoid;
using tensor::softmax;
using tensor::transpose;

std::string prefix(Modality m) { return m == Modality::EEG ? "eeg." : "emg."; }

}  // namespace

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  register_parameters();
}

Model::Model(ModelConfig config, uint64_t seed) : Model(std::move(config)) {
  init_parameters(seed);
}

void Model::register_parameters() {
  auto addp = [&](const std::string& name, Shape shape) {
    params_.emplace_back(name, Tensor::zeros(std::move(shape), true));
  };

  const auto conv_stack = [&](Modality m, int64_t) {
    const std::string pre = prefix(m);
    addp(pre + "stem.w", {config_.branch_features, 1, config_.large_kernel});
    addp(pre + "stem.b", {config_.branch_features});
    for (size_t i = 0; i < config_.branch_kernels.size(); ++i) {
      const std::string bp = pre + "branch" + std::to_string(i) + ".";
      addp(bp + "w",
           {config_.branch_features, config_.branch_features, config_.branch_kernels[i]});
      addp(bp + "b", {config_.branch_features});
    }
  };
  const auto se_stack = [&](Modality m, int64_t channels, int64_t reduction) {
    const std::string pre = prefix(m);
    addp(pre + "se.w1", {channels, channels / reduction});
    addp(pre + "se.w2", {channels / reduction, channels});
  };

  conv_stack(Modality::EEG, config_.in_channels_eeg);
  se_stack(Modality::EEG, config_.in_channels_eeg, config_.se_reduction);
  if (config_.fusion()) {
    conv_stack(Modality::EMG, config_.in_channels_emg);
    se_stack(Modality::EMG, config_.in_channels_emg, config_.se_reduction_emg);
  }

  const int64_t width =
      config_.features() * (config_.in_channels_eeg + config_.in_channels_emg);
  const int64_t d = config_.embed_dim;
  addp("embed.w", {width, d});
  addp("embed.b", {d});
  addp("embed.pos", {config_.pooled_samples(), d});

  for (const char* n : {"wq", "wk", "wv", "wo"}) addp(std::string("attn.") + n, {d, d});
  for (const char* n : {"bq", "bk", "bv", "bo"}) addp(std::string("attn.") + n, {d});
  addp("attn.ln.gain", {d});
  addp("attn.ln.bias", {d});

  addp("head.ln.gain", {d});
  addp("head.ln.bias", {d});
  addp("head.fc1.w", {d, d / 2});
  addp("head.fc1.b", {d / 2});
  addp("head.fc2.w", {d / 2, config_.out_dim});
  addp("head.fc2.b", {config_.out_dim});
}

void Model::init_parameters(uint64_t seed) {
  Rng rng(seed);
  for (auto& [name, t] : params_) {
    auto& v = t.mutable_values();
    const Shape& s = t.shape();
    if (name.ends_with("ln.gain")) {
      std::fill(v.begin(), v.end(), 1.0);
    } else if (s.size() == 1) {  // biases
      std::fill(v.begin(), v.end(), 0.0);
    } else if (name == "embed.pos") {
      for (double& x : v) x = rng.uniform(-0.01, 0.01);
    } else {
      // weight matrices [in, out] and conv kernels [out, in, k]
      const int64_t fan_in = s.size() == 2 ? s[0] : s[1] * s[2];
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (double& x : v) x = rng.uniform(-bound, bound);
    }
  }
}

const Tensor& Model::param(const std::string& name) const {
  for (const auto& [n, t] : params_) {
    if (n == name) return t;
  }
  throw std::out_of_range("model has no parameter named '" + name + "'");
}

Tensor& Model::mutable_param(const std::string& name) {
  for (auto& [n, t] : params_) {
    if (n == name) return t;
  }
  throw std::out_of_range("model has no parameter named '" + name + "'");
}

Tensor Model::apply_dropout(const Tensor& x, bool training, Rng* rng) const {
  if (!training || config_.dropout == 0.0) return x;
  if (!rng) throw std::invalid_argument("training with dropout needs an rng");
  const double keep = 1.0 - config_.dropout;
  std::vector<double> mask(static_cast<size_t>(x.size()));
  for (double& m : mask) m = rng->uniform() < keep ? 1.0 / keep : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

Tensor Model::multi_conv_block(const Tensor& x, Modality m, bool training, Rng* rng) const {
  const std::string pre = prefix(m);
  const int64_t channels =
      m == Modality::EEG ? config_.in_channels_eeg : config_.in_channels_emg;
  if (channels == 0) throw std::invalid_argument("multi_conv_block: EMG path is disabled");
  if (x.ndim() != 3 || x.dim(1) != channels || x.dim(2) != config_.window_samples) {
    throw std::invalid_argument("multi_conv_block: expected [B, " + std::to_string(channels) +
                                ", " + std::to_string(config_.window_samples) + "], got " +
                                tensor::shape_str(x.shape()));
  }
  const int64_t batch = x.dim(0);

  Tensor h = reshape(x, {batch * channels, 1, config_.window_samples});
  h = conv1d(h, param(pre + "stem.w"), 1, (config_.large_kernel - 1) / 2);
  h = elu(bias_axis(h, param(pre + "stem.b"), 1));

  std::vector<Tensor> branches;
  branches.reserve(config_.branch_kernels.size());
  for (size_t i = 0; i < config_.branch_kernels.size(); ++i) {
    const std::string bp = pre + "branch" + std::to_string(i) + ".";
    Tensor b = conv1d(h, param(bp + "w"), 1, (config_.branch_kernels[i] - 1) / 2);
    branches.push_back(elu(bias_axis(b, param(bp + "b"), 1)));
  }
  Tensor cat = branches.size() == 1 ? branches[0] : concat(branches, 1);

  Tensor pooled = avg_pool1d(cat, config_.pool_k, config_.pool_s);
  pooled = apply_dropout(pooled, training, rng);
  Tensor stacked =
      reshape(pooled, {batch, channels, config_.features(), config_.pooled_samples()});
  return transpose(stacked, 1, 2);
}

Tensor Model::se_block(const Tensor& x, Modality m) const {
  const std::string pre = prefix(m);
  const int64_t channels =
      m == Modality::EEG ? config_.in_channels_eeg : config_.in_channels_emg;
  if (channels == 0) throw std::invalid_argument("se_block: EMG path is disabled");
  if (x.ndim() != 4 || x.dim(1) != channels) {
    throw std::invalid_argument("se_block: expected [B, " + std::to_string(channels) +
                                ", F, T], got " + tensor::shape_str(x.shape()));
  }
  const Tensor z = mean_over_axis(mean_over_axis(x, 3), 2);
  const Tensor s =
      sigmoid(dense(relu(dense(z, param(pre + "se.w1"), Tensor())), param(pre + "se.w2"), Tensor()));
  return scale_channels(x, s);
}

Tensor Model::embed(const Tensor& eeg, const Tensor* emg) const {
  const int64_t f = config_.features();
  const int64_t tp = config_.pooled_samples();
  if (eeg.ndim() != 4 || eeg.dim(1) != config_.in_channels_eeg || eeg.dim(2) != f ||
      eeg.dim(3) != tp) {
    throw std::invalid_argument("embed: expected EEG [B, " +
                                std::to_string(config_.in_channels_eeg) + ", " +
                                std::to_string(f) + ", " + std::to_string(tp) + "], got " +
                                tensor::shape_str(eeg.shape()));
  }
  if (config_.fusion() != (emg != nullptr)) {
    throw std::invalid_argument(config_.fusion() ? "embed: config enables fusion but no EMG given"
                                                 : "embed: EMG given but fusion is disabled");
  }

  Tensor tokens = transpose(eeg, 1, 3);  // [B, T', F, C]
  if (emg) {
    if (emg->ndim() != 4 || emg->dim(0) != eeg.dim(0) ||
        emg->dim(1) != config_.in_channels_emg || emg->dim(2) != f) {
      throw std::invalid_argument("embed: expected EMG [B, " +
                                  std::to_string(config_.in_channels_emg) + ", " +
                                  std::to_string(f) + ", T'], got " +
                                  tensor::shape_str(emg->shape()));
    }
    if (emg->dim(3) != tp) {
      throw std::invalid_argument("embed: EMG temporal length " + std::to_string(emg->dim(3)) +
                                  " does not match EEG temporal length " + std::to_string(tp));
    }
    tokens = concat({tokens, transpose(*emg, 1, 3)}, 3);
  }

  const int64_t width = f * (config_.in_channels_eeg + config_.in_channels_emg);
  Tensor flat = reshape(tokens, {eeg.dim(0), tp, width});
  Tensor z = dense(flat, param("embed.w"), param("embed.b"));
  return add(z, param("embed.pos"));
}

AttentionResult Model::self_attention_block(const Tensor& z) const {
  const int64_t d = config_.embed_dim;
  if (z.ndim() != 3 || z.dim(2) != d) {
    throw std::invalid_argument("self_attention_block: expected [B, T, " + std::to_string(d) +
                                "], got " + tensor::shape_str(z.shape()));
  }
  const int64_t batch = z.dim(0);
  const int64_t t = z.dim(1);
  const int64_t h = config_.heads;
  const int64_t dk = config_.head_dim;

  auto heads_of = [&](const Tensor& m) {
    return transpose(reshape(m, {batch, t, h, dk}), 1, 2);  // [B, h, T, dk]
  };
  const Tensor q = heads_of(dense(z, param("attn.wq"), param("attn.bq")));
  const Tensor k = heads_of(dense(z, param("attn.wk"), param("attn.bk")));
  const Tensor v = heads_of(dense(z, param("attn.wv"), param("attn.bv")));

  const Tensor scores = scale(matmul(q, transpose(k, 2, 3)), 1.0 / std::sqrt(double(dk)));
  const Tensor probs = softmax(scores, 3);  // [B, h, T, T]
  Tensor ctx = matmul(probs, v);            // [B, h, T, dk]
  ctx = reshape(transpose(ctx, 1, 2), {batch, t, d});

  const Tensor projected = dense(ctx, param("attn.wo"), param("attn.bo"));
  const Tensor out =
      layer_norm(add(z, projected), param("attn.ln.gain"), param("attn.ln.bias"));
  return {out, probs};
}

Tensor Model::fc_head(const Tensor& z, bool training, Rng* rng, Tensor* latent) const {
  const int64_t d = config_.embed_dim;
  if (z.ndim() != 3 || z.dim(2) != d) {
    throw std::invalid_argument("fc_head: expected [B, T, " + std::to_string(d) + "], got " +
                                tensor::shape_str(z.shape()));
  }
  const Tensor pooled = mean_over_axis(z, 1);  // [B, D]
  const Tensor normed = layer_norm(pooled, param("head.ln.gain"), param("head.ln.bias"));
  if (latent) *latent = normed;
  Tensor hidden = elu(dense(normed, param("head.fc1.w"), param("head.fc1.b")));
  hidden = apply_dropout(hidden, training, rng);
  return dense(hidden, param("head.fc2.w"), param("head.fc2.b"));
}

DecoderOutput Model::forward(const Tensor& x_eeg, const Tensor* x_emg, bool training,
                             Rng* rng) const {
  if (config_.fusion() != (x_emg != nullptr)) {
    throw std::invalid_argument(config_.fusion() ? "forward: config enables fusion but no EMG given"
                                                 : "forward: EMG given but fusion is disabled");
  }

  Tensor eeg = se_block(transpose(multi_conv_block(x_eeg, Modality::EEG, training, rng), 1, 2),
                        Modality::EEG);
  Tensor tokens;
  if (x_emg) {
    Tensor emg = se_block(transpose(multi_conv_block(*x_emg, Modality::EMG, training, rng), 1, 2),
                          Modality::EMG);
    tokens = embed(eeg, &emg);
  } else {
    tokens = embed(eeg);
  }

  const AttentionResult att = self_attention_block(tokens);
  DecoderOutput out;
  out.attention_probs = att.probs;
  out.output = fc_head(att.output, training, rng, &out.latent);
  return out;
}

void Model::save(const std::filesystem::path& path) const {
  checkpoint::Checkpoint ckpt;
  ckpt.metadata = config_to_json(config_);
  ckpt.arrays.reserve(params_.size());
  for (const auto& [name, t] : params_) {
    ckpt.arrays.push_back({name, t.shape(), t.values()});
  }
  checkpoint::save_checkpoint(path, ckpt);
}

Model Model::load(const std::filesystem::path& path) {
  const checkpoint::Checkpoint ckpt = checkpoint::load_checkpoint(path);
  Model m(config_from_json(ckpt.metadata));
  if (ckpt.arrays.size() != m.params_.size()) {
    throw std::runtime_error(path.string() + ": checkpoint has " +
                             std::to_string(ckpt.arrays.size()) + " arrays, model expects " +
                             std::to_string(m.params_.size()));
  }
  for (auto& [name, t] : m.params_) {
    const checkpoint::NamedArray& a = ckpt.at(name);
    if (a.shape != t.shape()) {
      throw std::runtime_error(path.string() + ": array '" + name + "' has shape " +
                               tensor::shape_str(a.shape) + ", model expects " +
                               tensor::shape_str(t.shape()));
    }
    t.mutable_values() = a.values;
  }
  return m;
}

}  // namespace kinedec::model
