#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "castling/attention.hpp"
#include "castling/autodiff.hpp"

namespace castling::model {

struct ModelConfig {
  std::size_t depth = 2;
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t patch = 4;
  std::size_t image = 16;
  std::size_t classes = 4;
  std::size_t mlp_ratio = 2;
  attention::KernelKind kernel = attention::KernelKind::LinearAngular;
  attention::Eq9Mode mode = attention::Eq9Mode::Literal;
  bool normalize_qk = true;
  // The default toy model is the full castling configuration: linear-angular
  // core plus depthwise-conv branch plus the masked auxiliary softmax branch.
  // The conv branch carries local mixing, which lets attention specialize
  // into sharp rows; without it the surviving-mask fraction plateaus around
  // twice its achievable floor on this 16-token task.
  bool use_dwconv = true;
  std::size_t dwconv_k = 3;
  bool grid_dwconv = true; // DWConv over the 2-D token grid rather than the sequence
  bool use_aux = true;
  // The auxiliary branch runs on raw QK^T logits by default. Normalized
  // logits are cosines in [-1, 1], which bounds softmax peaks near 1/N and
  // mathematically prevents rows from ever emptying under thresholds like
  // 0.02 at desk-scale N; the mask could then never converge to all zeros.
  bool aux_normalize = false;
  bool mlp_dwconv = false;
  // Init stddev of the q/k projections. Small by default so attention logits
  // start near zero: softmax rows open flat (every entry ~ 1/N) and sharpen
  // only as training grows the weights. The linear-angular core normalizes
  // q/k rows, so this scale only shapes the raw-logit branches.
  double qk_init = 0.02;

  std::size_t tokens_per_side() const { return image / patch; }
  std::size_t tokens() const { return tokens_per_side() * tokens_per_side(); }
  std::size_t head_dim() const { return width / heads; }

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Rearranges a G x G image into (G/p)^2 tokens of p^2 pixels, row-major over
// patches then pixels. Pure data movement ahead of the embedding.
Tensor patchify(const Tensor& image, std::size_t patch);

struct ForwardResult {
  Var logits;                              // batch x classes
  std::vector<std::size_t> mask_nonzeros;  // per layer, summed over heads and batch
  std::size_t mask_entries_per_layer = 0;  // heads * N * N * batch
  std::vector<Var> kept_values;            // surviving aux entries, for the sparsity penalty
};

// Pre-norm transformer classifier small enough to train in seconds:
// patch embed + positions, depth x (attention + MLP) blocks, mean pool, head.
// The attention kernel and the castling branches come from the config.
class TinyViT {
public:
  TinyViT(const ModelConfig& cfg, std::uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  // One tape hosts the whole batch; epsilon is the current mask threshold.
  ForwardResult forward_batch(Tape& tape, std::span<const Tensor> images, double epsilon);

  // Forward values only (fresh private tape), for eval and castling checks.
  Tensor logits(std::span<const Tensor> images, double epsilon);

  std::uint64_t inference_macs(bool castled) const;

private:
  struct Block {
    Parameter ln1_g, ln1_b;
    Parameter w_q, w_k, w_v, w_o;
    std::vector<Parameter> attn_dw; // one depthwise kernel per head
    Parameter ln2_g, ln2_b;
    Parameter mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    Parameter mlp_dw;
  };

  ModelConfig cfg_;
  Parameter embed_w_, embed_b_, pos_;
  std::vector<Block> blocks_;
  Parameter lnf_g_, lnf_b_;
  Parameter head_w_, head_b_;
};

// Checkpoints: one tensor file pair per parameter plus manifest.json carrying
// the model config and the parameter list.
void save_checkpoint(const TinyViT& model, const std::filesystem::path& dir);
TinyViT load_checkpoint(const std::filesystem::path& dir);

} // namespace castling::model
