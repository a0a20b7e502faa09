#include "castling/model.hpp"

#include <cmath>
#include <fstream>

#include "castling/flops.hpp"
#include "castling/rng.hpp"
#include "castling/tensor_io.hpp"

namespace castling::model {

using attention::AttentionConfig;
using attention::KernelKind;

void ModelConfig::validate() const {
  if (depth == 0 || width == 0 || heads == 0 || patch == 0 || image == 0)
    throw ConfigError("model extents must be positive");
  if (classes < 2) throw ConfigError("model needs at least 2 classes");
  if (image % patch != 0)
    throw ConfigError("image size " + std::to_string(image) + " not divisible by patch " +
                      std::to_string(patch));
  if (width % heads != 0)
    throw ConfigError("width " + std::to_string(width) + " not divisible by heads " +
                      std::to_string(heads));
  if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be >= 1");
  if (dwconv_k % 2 == 0) throw ConfigError("dwconv kernel size must be odd");
  if (tokens() < 2) throw ConfigError("model needs at least 2 tokens");
  if (!(qk_init > 0.0)) throw ConfigError("qk_init must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return nlohmann::json{{"depth", depth},
                        {"width", width},
                        {"heads", heads},
                        {"patch", patch},
                        {"image", image},
                        {"classes", classes},
                        {"mlp_ratio", mlp_ratio},
                        {"kernel", attention::to_string(kernel)},
                        {"mode", attention::to_string(mode)},
                        {"normalize_qk", normalize_qk},
                        {"use_dwconv", use_dwconv},
                        {"dwconv_k", dwconv_k},
                        {"grid_dwconv", grid_dwconv},
                        {"use_aux", use_aux},
                        {"aux_normalize", aux_normalize},
                        {"mlp_dwconv", mlp_dwconv},
                        {"qk_init", qk_init}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.depth = j.value("depth", c.depth);
    c.width = j.value("width", c.width);
    c.heads = j.value("heads", c.heads);
    c.patch = j.value("patch", c.patch);
    c.image = j.value("image", c.image);
    c.classes = j.value("classes", c.classes);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    if (j.contains("kernel")) c.kernel = attention::kernel_from_string(j["kernel"].get<std::string>());
    if (j.contains("mode")) c.mode = attention::mode_from_string(j["mode"].get<std::string>());
    c.normalize_qk = j.value("normalize_qk", c.normalize_qk);
    c.use_dwconv = j.value("use_dwconv", c.use_dwconv);
    c.dwconv_k = j.value("dwconv_k", c.dwconv_k);
    c.grid_dwconv = j.value("grid_dwconv", c.grid_dwconv);
    c.use_aux = j.value("use_aux", c.use_aux);
    c.aux_normalize = j.value("aux_normalize", c.aux_normalize);
    c.mlp_dwconv = j.value("mlp_dwconv", c.mlp_dwconv);
    c.qk_init = j.value("qk_init", c.qk_init);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

Tensor patchify(const Tensor& image, std::size_t patch) {
  if (image.rank() != 2 || image.shape()[0] != image.shape()[1])
    throw ShapeError("patchify expects a square rank-2 image, got " + shape_str(image.shape()));
  const std::size_t g = image.shape()[0];
  if (patch == 0 || g % patch != 0) throw ShapeError("patchify: image not divisible by patch");
  const std::size_t side = g / patch;
  Tensor tokens({side * side, patch * patch});
  for (std::size_t py = 0; py < side; ++py)
    for (std::size_t px = 0; px < side; ++px) {
      const std::size_t t = py * side + px;
      for (std::size_t iy = 0; iy < patch; ++iy)
        for (std::size_t ix = 0; ix < patch; ++ix)
          tokens(t, iy * patch + ix) = image(py * patch + iy, px * patch + ix);
    }
  return tokens;
}

namespace {

Tensor normal_init(SplitMix64& rng, Shape shape, double stddev) {
  return Tensor::normal(std::move(shape), rng, stddev);
}

} // namespace

TinyViT::TinyViT(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  SplitMix64 rng(init_seed);
  const std::size_t n = cfg_.tokens(), d = cfg_.width, p2 = cfg_.patch * cfg_.patch;
  const std::size_t hidden = cfg_.width * cfg_.mlp_ratio;
  const std::size_t dh = cfg_.head_dim();
  const std::size_t k = cfg_.dwconv_k;

  embed_w_ = Parameter("embed.w", normal_init(rng, {p2, d}, 1.0 / std::sqrt(double(p2))));
  embed_b_ = Parameter("embed.b", Tensor({1, d}));
  pos_ = Parameter("pos", normal_init(rng, {n, d}, 0.02));

  blocks_.resize(cfg_.depth);
  for (std::size_t b = 0; b < cfg_.depth; ++b) {
    Block& blk = blocks_[b];
    const std::string pre = "block" + std::to_string(b) + ".";
    const double ws = 1.0 / std::sqrt(double(d));
    blk.ln1_g = Parameter(pre + "ln1.g", Tensor::ones({1, d}));
    blk.ln1_b = Parameter(pre + "ln1.b", Tensor({1, d}));
    blk.w_q = Parameter(pre + "w_q", normal_init(rng, {d, d}, cfg_.qk_init));
    blk.w_k = Parameter(pre + "w_k", normal_init(rng, {d, d}, cfg_.qk_init));
    blk.w_v = Parameter(pre + "w_v", normal_init(rng, {d, d}, ws));
    blk.w_o = Parameter(pre + "w_o", normal_init(rng, {d, d}, ws));
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      // zero taps: the conv branch starts as an exact no-op
      Shape ks = cfg_.grid_dwconv ? Shape{dh, k, k} : Shape{dh, k};
      blk.attn_dw.emplace_back(pre + "attn_dw" + std::to_string(h), Tensor(ks));
    }
    blk.ln2_g = Parameter(pre + "ln2.g", Tensor::ones({1, d}));
    blk.ln2_b = Parameter(pre + "ln2.b", Tensor({1, d}));
    blk.mlp_w1 = Parameter(pre + "mlp.w1", normal_init(rng, {d, hidden}, ws));
    blk.mlp_b1 = Parameter(pre + "mlp.b1", Tensor({1, hidden}));
    blk.mlp_w2 =
        Parameter(pre + "mlp.w2", normal_init(rng, {hidden, d}, 1.0 / std::sqrt(double(hidden))));
    blk.mlp_b2 = Parameter(pre + "mlp.b2", Tensor({1, d}));
    // identity taps: with dwconv enabled the MLP starts as a plain MLP
    Shape mks = cfg_.grid_dwconv ? Shape{hidden, k, k} : Shape{hidden, k};
    Tensor mdw(mks);
    for (std::size_t c = 0; c < hidden; ++c) {
      if (cfg_.grid_dwconv)
        mdw.at((c * k + k / 2) * k + k / 2) = 1.0;
      else
        mdw.at(c * k + k / 2) = 1.0;
    }
    blk.mlp_dw = Parameter(pre + "mlp.dw", std::move(mdw));
  }

  lnf_g_ = Parameter("lnf.g", Tensor::ones({1, d}));
  lnf_b_ = Parameter("lnf.b", Tensor({1, d}));
  head_w_ = Parameter("head.w", normal_init(rng, {d, cfg_.classes}, 1.0 / std::sqrt(double(d))));
  head_b_ = Parameter("head.b", Tensor({1, cfg_.classes}));
}

std::vector<Parameter*> TinyViT::parameters() {
  std::vector<Parameter*> ps{&embed_w_, &embed_b_, &pos_};
  for (Block& b : blocks_) {
    ps.push_back(&b.ln1_g);
    ps.push_back(&b.ln1_b);
    ps.push_back(&b.w_q);
    ps.push_back(&b.w_k);
    ps.push_back(&b.w_v);
    ps.push_back(&b.w_o);
    for (Parameter& dw : b.attn_dw) ps.push_back(&dw);
    ps.push_back(&b.ln2_g);
    ps.push_back(&b.ln2_b);
    ps.push_back(&b.mlp_w1);
    ps.push_back(&b.mlp_b1);
    ps.push_back(&b.mlp_w2);
    ps.push_back(&b.mlp_b2);
    ps.push_back(&b.mlp_dw);
  }
  ps.push_back(&lnf_g_);
  ps.push_back(&lnf_b_);
  ps.push_back(&head_w_);
  ps.push_back(&head_b_);
  return ps;
}

std::vector<const Parameter*> TinyViT::parameters() const {
  auto* self = const_cast<TinyViT*>(this);
  std::vector<Parameter*> ps = self->parameters();
  return {ps.begin(), ps.end()};
}

ForwardResult TinyViT::forward_batch(Tape& tape, std::span<const Tensor> images, double epsilon) {
  if (images.empty()) throw ContractError("forward_batch: empty batch");
  const std::size_t n = cfg_.tokens(), dh = cfg_.head_dim();
  const std::size_t side = cfg_.tokens_per_side();

  ForwardResult result;
  result.mask_nonzeros.assign(cfg_.depth, 0);
  result.mask_entries_per_layer =
      cfg_.use_aux && cfg_.kernel == KernelKind::LinearAngular
          ? cfg_.heads * n * n * images.size()
          : 0;

  AttentionConfig head_cfg;
  head_cfg.n_q = head_cfg.n_k = n;
  head_cfg.d = head_cfg.d_v = dh;
  head_cfg.kernel = cfg_.kernel;
  head_cfg.mode = cfg_.mode;
  head_cfg.normalize_qk = cfg_.normalize_qk;
  head_cfg.use_dwconv = cfg_.use_dwconv;
  head_cfg.dwconv_k = cfg_.dwconv_k;
  head_cfg.use_aux = cfg_.use_aux;
  head_cfg.epsilon = epsilon;
  head_cfg.aux_normalize = cfg_.aux_normalize;
  if (cfg_.use_dwconv && cfg_.grid_dwconv) {
    head_cfg.grid_h = side;
    head_cfg.grid_w = side;
  }

  std::vector<Var> sample_logits;
  sample_logits.reserve(images.size());

  for (const Tensor& image : images) {
    Var x = tape.leaf(patchify(image, cfg_.patch));
    x = op_add(op_add_rowvec(op_matmul(x, tape.param(embed_w_)), tape.param(embed_b_)),
               tape.param(pos_));

    for (std::size_t bi = 0; bi < cfg_.depth; ++bi) {
      Block& blk = blocks_[bi];
      Var h = op_layer_norm_rows(x, tape.param(blk.ln1_g), tape.param(blk.ln1_b));
      Var q = op_matmul(h, tape.param(blk.w_q));
      Var k = op_matmul(h, tape.param(blk.w_k));
      Var v = op_matmul(h, tape.param(blk.w_v));

      std::vector<Var> head_outs;
      head_outs.reserve(cfg_.heads);
      for (std::size_t hd = 0; hd < cfg_.heads; ++hd) {
        const std::size_t c0 = hd * dh, c1 = (hd + 1) * dh;
        Var qh = op_slice_cols(q, c0, c1);
        Var kh = op_slice_cols(k, c0, c1);
        Var vh = op_slice_cols(v, c0, c1);
        switch (cfg_.kernel) {
          case KernelKind::LinearAngular: {
            auto out = attention::castling_attention(head_cfg, qh, kh, vh,
                                                     tape.param(blk.attn_dw[hd]));
            if (out.has_aux) {
              result.kept_values.push_back(out.aux_kept);
              std::size_t nz = 0;
              for (double m : out.aux_mask.values()) nz += m != 0.0 ? 1 : 0;
              result.mask_nonzeros[bi] += nz;
            }
            head_outs.push_back(out.output);
            break;
          }
          case KernelKind::ExactSoftmax:
            head_outs.push_back(attention::softmax_attention(qh, kh, vh));
            break;
          case KernelKind::Angular:
            head_outs.push_back(
                attention::quadratic_angular_attention(qh, kh, vh, cfg_.normalize_qk));
            break;
          default:
            head_outs.push_back(attention::kernel_linear_attention(cfg_.kernel, qh, kh, vh));
        }
      }
      Var attn = head_outs.size() == 1 ? head_outs[0] : op_concat_cols(head_outs);
      x = op_add(x, op_matmul(attn, tape.param(blk.w_o)));

      Var h2 = op_layer_norm_rows(x, tape.param(blk.ln2_g), tape.param(blk.ln2_b));
      Var z = op_add_rowvec(op_matmul(h2, tape.param(blk.mlp_w1)), tape.param(blk.mlp_b1));
      if (cfg_.mlp_dwconv) {
        if (cfg_.grid_dwconv) {
          const std::size_t hidden = cfg_.width * cfg_.mlp_ratio;
          Var img = op_reshape(z, {side, side, hidden});
          z = op_reshape(op_dwconv2d(img, tape.param(blk.mlp_dw)), {n, hidden});
        } else {
          z = op_dwconv1d(z, tape.param(blk.mlp_dw));
        }
      }
      Var y = op_add_rowvec(op_matmul(op_relu(z), tape.param(blk.mlp_w2)), tape.param(blk.mlp_b2));
      x = op_add(x, y);
    }

    Var pooled = op_mean_rows(op_layer_norm_rows(x, tape.param(lnf_g_), tape.param(lnf_b_)));
    sample_logits.push_back(
        op_add_rowvec(op_matmul(pooled, tape.param(head_w_)), tape.param(head_b_)));
  }

  result.logits =
      sample_logits.size() == 1 ? sample_logits[0] : op_concat_rows(sample_logits);
  return result;
}

Tensor TinyViT::logits(std::span<const Tensor> images, double epsilon) {
  Tape tape;
  return forward_batch(tape, images, epsilon).logits.value();
}

std::uint64_t TinyViT::inference_macs(bool castled) const {
  const std::uint64_t n = cfg_.tokens(), d = cfg_.width, p2 = cfg_.patch * cfg_.patch;
  const std::uint64_t hidden = d * cfg_.mlp_ratio;
  const std::size_t dh = cfg_.head_dim();

  AttentionConfig head_cfg;
  head_cfg.n_q = head_cfg.n_k = n;
  head_cfg.d = head_cfg.d_v = dh;
  head_cfg.kernel = cfg_.kernel;
  head_cfg.mode = cfg_.mode;
  head_cfg.normalize_qk = cfg_.normalize_qk;
  head_cfg.use_dwconv = cfg_.use_dwconv;
  head_cfg.dwconv_k = cfg_.dwconv_k;
  head_cfg.use_aux = cfg_.use_aux;
  head_cfg.aux_normalize = cfg_.aux_normalize;
  if (cfg_.use_dwconv && cfg_.grid_dwconv) {
    head_cfg.grid_h = cfg_.tokens_per_side();
    head_cfg.grid_w = cfg_.tokens_per_side();
  }
  const std::uint64_t attn_per_head = flop_count(head_cfg, castled).total_macs();

  std::uint64_t macs = n * p2 * d; // embedding
  std::uint64_t per_block = 4 * n * d * d + cfg_.heads * attn_per_head; // qkv + output proj
  per_block += n * d * hidden + n * hidden * d; // mlp
  if (cfg_.mlp_dwconv)
    per_block += cfg_.grid_dwconv ? n * hidden * cfg_.dwconv_k * cfg_.dwconv_k
                                  : n * hidden * cfg_.dwconv_k;
  macs += cfg_.depth * per_block;
  macs += d * cfg_.classes; // classifier head
  return macs;
}

void save_checkpoint(const TinyViT& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["schema_version"] = 1;
  manifest["model"] = model.config().to_json();
  nlohmann::json params = nlohmann::json::array();
  for (const Parameter* p : model.parameters()) {
    save_tensor(dir / p->name, p->value);
    params.push_back({{"name", p->name}, {"shape", p->value.shape()}});
  }
  manifest["parameters"] = params;
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  if (!f) throw ConfigError("cannot write checkpoint manifest in " + dir.string());
  f << manifest.dump(2) << "\n";
}

TinyViT load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw ConfigError("missing checkpoint manifest: " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    f >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad checkpoint manifest: ") + e.what());
  }
  if (manifest.value("schema_version", 0) != 1)
    throw ConfigError("unsupported checkpoint schema_version");
  TinyViT model(ModelConfig::from_json(manifest.at("model")), 0);
  for (Parameter* p : model.parameters()) {
    Tensor t = load_tensor(dir / p->name);
    if (!t.same_shape(p->value))
      throw ConfigError("checkpoint parameter " + p->name + " has shape " + shape_str(t.shape()) +
                        ", expected " + shape_str(p->value.shape()));
    p->value = std::move(t);
    p->grad = Tensor(p->value.shape());
  }
  return model;
}

} // namespace castling::model
