#include "ddeq/net.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace ddeq {

void ModelConfig::validate() const {
  if (data_dim < 1 || latent_dim < 1 || bilinear_dim < 1 || per_head_dim < 1 ||
      cross_encoder_layers < 1 || self_encoder_layers < 1 || ffn_mult < 1)
    throw ConfigError("model dimensions must be >= 1");
  if (latent_dim % per_head_dim != 0)
    throw ConfigError("latent_dim must be divisible by per_head_dim");
  if (with_coupling && latent_dim % 2 != 0)
    throw OddLatentDim("coupling layer needs an even latent_dim");
}

void ParamStore::add(const std::string& name, Tensor value) {
  if (has(name)) throw Error("ParamStore: duplicate name " + name);
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(value));
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("ParamStore: unknown name " + name);
  return items_[it->second].second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("ParamStore: unknown name " + name);
  return items_[it->second].second;
}

BoundParams::BoundParams(Tape& tape, const ParamStore& store,
                         bool requires_grad) {
  vars_.reserve(store.size());
  names_.reserve(store.size());
  for (const auto& [name, value] : store.items()) {
    index_[name] = vars_.size();
    names_.push_back(name);
    vars_.push_back(requires_grad ? tape.leaf(value, true)
                                  : tape.constant(value));
  }
}

Var BoundParams::operator[](const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("BoundParams: unknown name " + name);
  return vars_[it->second];
}

namespace {

Tensor glorot(Rng& rng, int64_t fan_in, int64_t fan_out) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor w(fan_in, fan_out);
  for (auto& v : w.vec()) v = (2.0 * rng.uniform() - 1.0) * limit;
  return w;
}

void add_ffn2(ParamStore& p, Rng& rng, const std::string& prefix, int64_t in,
              int64_t hidden, int64_t out) {
  p.add(prefix + ".w1", glorot(rng, in, hidden));
  p.add(prefix + ".b1", Tensor::zeros(1, hidden));
  p.add(prefix + ".w2", glorot(rng, hidden, out));
  p.add(prefix + ".b2", Tensor::zeros(1, out));
}

void add_layer_norm(ParamStore& p, const std::string& prefix, int64_t dim) {
  p.add(prefix + ".gain", Tensor::full(1, dim, 1.0));
  p.add(prefix + ".bias", Tensor::zeros(1, dim));
}

void add_encoder(ParamStore& p, Rng& rng, const std::string& prefix,
                 int64_t dim, int64_t ffn_hidden) {
  p.add(prefix + ".attn.wq", glorot(rng, dim, dim));
  p.add(prefix + ".attn.bq", Tensor::zeros(1, dim));
  p.add(prefix + ".attn.wk", glorot(rng, dim, dim));
  p.add(prefix + ".attn.bk", Tensor::zeros(1, dim));
  p.add(prefix + ".attn.wv", glorot(rng, dim, dim));
  p.add(prefix + ".attn.bv", Tensor::zeros(1, dim));
  p.add(prefix + ".attn.wo", glorot(rng, dim, dim));
  p.add(prefix + ".attn.bo", Tensor::zeros(1, dim));
  add_layer_norm(p, prefix + ".ln1", dim);
  add_ffn2(p, rng, prefix + ".ffn", dim, ffn_hidden, dim);
  add_layer_norm(p, prefix + ".ln2", dim);
}

}  // namespace

ParamStore init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamStore p;
  const int64_t d = cfg.data_dim, pd = cfg.latent_dim, bd = cfg.bilinear_dim;
  const int64_t ffn_hidden = static_cast<int64_t>(cfg.ffn_mult) * pd;

  add_ffn2(p, rng, "z_down", pd, bd, bd);
  add_layer_norm(p, "ln_z16", bd);
  add_ffn2(p, rng, "x_in", d, bd, bd);
  add_layer_norm(p, "ln_x16", bd);
  {
    Tensor alpha(bd, bd, bd), beta(bd, bd, bd);
    double s = 1.0 / static_cast<double>(bd);
    for (auto& v : alpha.vec()) v = rng.normal() * s;
    for (auto& v : beta.vec()) v = rng.normal() * s;
    p.add("bilinear.alpha", std::move(alpha));
    p.add("bilinear.beta", std::move(beta));
  }
  add_layer_norm(p, "ln_bil", bd);
  add_ffn2(p, rng, "z_up", bd, pd, pd);
  add_layer_norm(p, "ln_zup", pd);
  add_ffn2(p, rng, "x_up", bd, pd, pd);
  add_layer_norm(p, "ln_xup", pd);

  for (int i = 0; i < cfg.self_encoder_layers; ++i)
    add_encoder(p, rng, "x_self." + std::to_string(i), pd, ffn_hidden);
  for (int i = 0; i < cfg.self_encoder_layers; ++i)
    add_encoder(p, rng, "z_self." + std::to_string(i), pd, ffn_hidden);
  for (int i = 0; i < cfg.cross_encoder_layers; ++i)
    add_encoder(p, rng, "cross." + std::to_string(i), pd, ffn_hidden);

  add_ffn2(p, rng, "final_ffn", pd, ffn_hidden, pd);
  add_layer_norm(p, "final_ln", pd);

  if (cfg.num_classes > 0) {
    p.add("head.w", glorot(rng, pd, cfg.num_classes));
    p.add("head.b", Tensor::zeros(1, cfg.num_classes));
  }
  if (cfg.with_coupling) {
    int64_t h = pd / 2;
    add_ffn2(p, rng, "coupling.phi", h, h, h);
    add_ffn2(p, rng, "coupling.psi", h, h, h);
  }
  return p;
}

Var ffn2(Tape& t, Var x, const BoundParams& p, const std::string& prefix) {
  int64_t n = t.value(x).rows();
  Var h = t.relu(t.add(t.matmul(x, p[prefix + ".w1"]),
                       t.broadcast_row(p[prefix + ".b1"], n)));
  return t.add(t.matmul(h, p[prefix + ".w2"]),
               t.broadcast_row(p[prefix + ".b2"], n));
}

Var layer_norm_affine(Tape& t, Var x, const BoundParams& p,
                      const std::string& prefix) {
  int64_t n = t.value(x).rows();
  Var y = layer_norm(t, x);
  return t.add(t.mul(y, t.broadcast_row(p[prefix + ".gain"], n)),
               t.broadcast_row(p[prefix + ".bias"], n));
}

Var bilinear_forward(Tape& t, Var z, Var x, Var alpha, Var beta,
                     const std::vector<uint8_t>& z_mask,
                     const std::vector<uint8_t>& x_mask,
                     bool pushforward_only) {
  const Tensor& tz = t.value(z);
  const Tensor& tx = t.value(x);
  const Tensor& ta = t.value(alpha);
  if (!ta.rank3() || tz.cols() != ta.dim(0) || tx.cols() != ta.dim(2))
    throw ShapeError("bilinear_forward: shape mismatch");
  Var xbar = masked_mean_rows(t, x, x_mask);
  Var m_alpha = t.tensor_vec_contract(alpha, xbar);
  Var out = t.matmul(z, m_alpha);
  if (!pushforward_only) {
    Var zbar = masked_mean_rows(t, z, z_mask);
    Var m_beta = t.tensor_vec_contract(beta, xbar);
    Var row = t.matmul(zbar, m_beta);
    out = t.add(out, t.broadcast_row(row, tz.rows()));
  }
  return zero_masked_rows(t, out, z_mask);
}

Var multihead_attention(Tape& t, Var tgt, Var src, const BoundParams& p,
                        const std::string& prefix, int per_head_dim,
                        const std::vector<uint8_t>& tgt_mask,
                        const std::vector<uint8_t>& src_mask) {
  const int64_t dim = t.value(tgt).cols();
  if (dim % per_head_dim != 0)
    throw ShapeError("multihead_attention: dim not divisible by head size");
  const int64_t n = t.value(tgt).rows();
  const int64_t heads = dim / per_head_dim;
  const double temp = 1.0 / std::sqrt(static_cast<double>(per_head_dim));
  Var q = t.add(t.matmul(tgt, p[prefix + ".wq"]),
                t.broadcast_row(p[prefix + ".bq"], n));
  int64_t m = t.value(src).rows();
  Var k = t.add(t.matmul(src, p[prefix + ".wk"]),
                t.broadcast_row(p[prefix + ".bk"], m));
  Var v = t.add(t.matmul(src, p[prefix + ".wv"]),
                t.broadcast_row(p[prefix + ".bv"], m));
  Var concat;
  for (int64_t h = 0; h < heads; ++h) {
    int64_t c0 = h * per_head_dim, c1 = (h + 1) * per_head_dim;
    Var qh = t.slice_cols(q, c0, c1);
    Var kh = t.slice_cols(k, c0, c1);
    Var vh = t.slice_cols(v, c0, c1);
    Var logits = t.scale(t.matmul(qh, kh, false, true), temp);
    Var attn = t.masked_softmax(logits, src_mask);
    Var oh = t.matmul(attn, vh);
    concat = h == 0 ? oh : t.concat_cols(concat, oh);
  }
  Var out = t.add(t.matmul(concat, p[prefix + ".wo"]),
                  t.broadcast_row(p[prefix + ".bo"], n));
  return zero_masked_rows(t, out, tgt_mask);
}

Var encoder_block(Tape& t, Var x, Var src, const BoundParams& p,
                  const std::string& prefix, int per_head_dim,
                  const std::vector<uint8_t>& tgt_mask,
                  const std::vector<uint8_t>& src_mask) {
  Var att = multihead_attention(t, x, src, p, prefix + ".attn", per_head_dim,
                                tgt_mask, src_mask);
  Var y1 = layer_norm_affine(t, t.add(x, att), p, prefix + ".ln1");
  y1 = zero_masked_rows(t, y1, tgt_mask);
  Var f = ffn2(t, y1, p, prefix + ".ffn");
  Var y2 = layer_norm_affine(t, t.add(y1, f), p, prefix + ".ln2");
  return zero_masked_rows(t, y2, tgt_mask);
}

Var ddeq_core_forward(Tape& t, Var z, Var x, const BoundParams& p,
                      const ModelConfig& cfg, const CoreMasks& masks) {
  const bool pinned = !masks.pin_mask.empty();
  auto pin = [&](Var v) {
    return pinned ? pin_rows(t, v, z, masks.pin_mask) : v;
  };

  // Z stream down to the bilinear dimension.
  Var z16 = layer_norm_affine(t, ffn2(t, z, p, "z_down"), p, "ln_z16");
  z16 = zero_masked_rows(t, z16, masks.z_mask);
  // X stream into the bilinear dimension.
  Var x16 = layer_norm_affine(t, ffn2(t, x, p, "x_in"), p, "ln_x16");
  x16 = zero_masked_rows(t, x16, masks.x_mask);

  // Bilinear interaction; residuals feed the second and third layer norms.
  Var bil = bilinear_forward(t, z16, x16, p["bilinear.alpha"],
                             p["bilinear.beta"], masks.z_mask, masks.x_mask,
                             cfg.pushforward_only);
  Var t1 = layer_norm_affine(t, t.add(bil, z16), p, "ln_bil");
  t1 = zero_masked_rows(t, t1, masks.z_mask);
  Var zup = ffn2(t, t1, p, "z_up");
  Var t2 = layer_norm_affine(t, t.add(zup, z), p, "ln_zup");
  t2 = zero_masked_rows(t, t2, masks.z_mask);

  // X stream up to the encoder dimension, then self-encoding.
  Var xs = layer_norm_affine(t, ffn2(t, x16, p, "x_up"), p, "ln_xup");
  xs = zero_masked_rows(t, xs, masks.x_mask);
  for (int i = 0; i < cfg.self_encoder_layers; ++i)
    xs = encoder_block(t, xs, xs, p, "x_self." + std::to_string(i),
                       cfg.per_head_dim, masks.x_mask, masks.x_mask);

  // Z stream: self-encoder (unless pushforward-only), then cross attention.
  Var zs = t2;
  if (!cfg.pushforward_only) {
    for (int i = 0; i < cfg.self_encoder_layers; ++i) {
      zs = encoder_block(t, zs, zs, p, "z_self." + std::to_string(i),
                         cfg.per_head_dim, masks.z_mask, masks.z_mask);
      zs = pin(zs);
    }
  }
  for (int i = 0; i < cfg.cross_encoder_layers; ++i) {
    zs = encoder_block(t, zs, xs, p, "cross." + std::to_string(i),
                       cfg.per_head_dim, masks.z_mask, masks.x_mask);
    zs = pin(zs);
  }
  Var out = layer_norm_affine(t, ffn2(t, zs, p, "final_ffn"), p, "final_ln");
  out = zero_masked_rows(t, out, masks.z_mask);
  return pin(out);
}

Tensor core_forward_value(const ParamStore& params, const ModelConfig& cfg,
                          const Tensor& z, const Tensor& x,
                          const CoreMasks& masks) {
  Tape t;
  BoundParams p(t, params, false);
  Var zv = t.constant(z);
  Var xv = t.constant(x);
  return t.value(ddeq_core_forward(t, zv, xv, p, cfg, masks));
}

namespace {

std::pair<Var, Var> coupling_halves(Tape& t, Var z) {
  int64_t p = t.value(z).cols();
  if (p % 2 != 0) throw OddLatentDim("coupling layer needs an even width");
  return {t.slice_cols(z, 0, p / 2), t.slice_cols(z, p / 2, p)};
}

}  // namespace

Var coupling_forward(Tape& t, Var z, const BoundParams& p) {
  auto [z1, z2] = coupling_halves(t, z);
  Var phi = ffn2(t, z1, p, "coupling.phi");
  Var psi = ffn2(t, z1, p, "coupling.psi");
  return t.concat_cols(z1, t.add(t.mul(z2, t.exp(phi)), psi));
}

Var coupling_inverse(Tape& t, Var z, const BoundParams& p) {
  auto [z1, z2] = coupling_halves(t, z);
  Var phi = ffn2(t, z1, p, "coupling.phi");
  Var psi = ffn2(t, z1, p, "coupling.psi");
  return t.concat_cols(z1, t.mul(t.sub(z2, psi), t.exp(t.neg(phi))));
}

Tensor coupling_forward_value(const ParamStore& params, const Tensor& z) {
  Tape t;
  BoundParams p(t, params, false);
  return t.value(coupling_forward(t, t.constant(z), p));
}

Tensor coupling_inverse_value(const ParamStore& params, const Tensor& z) {
  Tape t;
  BoundParams p(t, params, false);
  return t.value(coupling_inverse(t, t.constant(z), p));
}

Var classify_head(Tape& t, Var zstar, const BoundParams& p,
                  const std::vector<uint8_t>& mask) {
  Var pooled = t.masked_max_pool(zstar, mask);
  return t.add(t.matmul(pooled, p["head.w"]), p["head.b"]);
}

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParamStore& params) {
  nlohmann::json j;
  j["format"] = "ddeq-checkpoint";
  j["version"] = 1;
  j["config"] = {{"data_dim", cfg.data_dim},
                 {"latent_dim", cfg.latent_dim},
                 {"bilinear_dim", cfg.bilinear_dim},
                 {"per_head_dim", cfg.per_head_dim},
                 {"cross_encoder_layers", cfg.cross_encoder_layers},
                 {"self_encoder_layers", cfg.self_encoder_layers},
                 {"ffn_mult", cfg.ffn_mult},
                 {"pushforward_only", cfg.pushforward_only},
                 {"num_classes", cfg.num_classes},
                 {"with_coupling", cfg.with_coupling}};
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [name, value] : params.items()) {
    nlohmann::json e;
    e["name"] = name;
    if (value.rank3())
      e["shape"] = {value.dim(0), value.dim(1), value.dim(2)};
    else
      e["shape"] = {value.rows(), value.cols()};
    e["data"] = value.vec();
    arr.push_back(std::move(e));
  }
  j["params"] = std::move(arr);
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint " + path);
  out << j.dump();
}

std::pair<ModelConfig, ParamStore> load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint " + path);
  nlohmann::json j;
  in >> j;
  if (j.value("format", "") != "ddeq-checkpoint" || j.value("version", 0) != 1)
    throw ParseError("not a ddeq-checkpoint v1 file: " + path);
  ModelConfig cfg;
  const auto& c = j.at("config");
  cfg.data_dim = c.at("data_dim");
  cfg.latent_dim = c.at("latent_dim");
  cfg.bilinear_dim = c.at("bilinear_dim");
  cfg.per_head_dim = c.at("per_head_dim");
  cfg.cross_encoder_layers = c.at("cross_encoder_layers");
  cfg.self_encoder_layers = c.at("self_encoder_layers");
  cfg.ffn_mult = c.at("ffn_mult");
  cfg.pushforward_only = c.at("pushforward_only");
  cfg.num_classes = c.at("num_classes");
  cfg.with_coupling = c.at("with_coupling");
  ParamStore params;
  for (const auto& e : j.at("params")) {
    std::vector<int64_t> shape = e.at("shape").get<std::vector<int64_t>>();
    Tensor v = shape.size() == 3 ? Tensor(shape[0], shape[1], shape[2])
                                 : Tensor(shape[0], shape[1]);
    std::vector<double> data = e.at("data").get<std::vector<double>>();
    if (static_cast<int64_t>(data.size()) != v.numel())
      throw ParseError("checkpoint tensor size mismatch for " +
                       e.at("name").get<std::string>());
    v.vec() = std::move(data);
    params.add(e.at("name").get<std::string>(), std::move(v));
  }
  return {cfg, params};
}

}  // namespace ddeq
