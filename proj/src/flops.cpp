#include "castling/flops.hpp"

namespace castling {

using attention::AttentionConfig;
using attention::KernelKind;

FlopReport flop_count(const AttentionConfig& cfg, bool castled) {
  cfg.validate();
  FlopReport r;
  const std::uint64_t n_q = cfg.n_q, n_k = cfg.n_k, d = cfg.d, d_v = cfg.d_v;

  switch (cfg.kernel) {
    case KernelKind::ExactSoftmax:
      r.kv_macs = n_q * n_k * d;
      r.q_macs = n_q * n_k * d_v;
      r.exp_ops = n_q * n_k;
      r.div_ops = n_q * n_k;
      break;
    case KernelKind::Angular:
      r.kv_macs = n_q * n_k * d;
      r.q_macs = n_q * n_k * d_v;
      r.exp_ops = n_q * n_k; // arccos per pair, same transcendental column
      break;
    case KernelKind::LinearAngular:
      r.kv_macs = n_k * d * d_v;
      r.q_macs = n_q * d * d_v;
      r.half_macs = n_q * d_v;
      break;
    case KernelKind::ReluS:
    case KernelKind::Cosine:
      r.kv_macs = n_k * d * d_v;
      r.q_macs = n_q * d * d_v;
      break;
    case KernelKind::ReluE:
      r.kv_macs = n_k * d * d_v;
      r.q_macs = n_q * d * d_v;
      r.norm_macs = n_q * d;  // phi(Q) against the summed keys
      r.div_ops = n_q * d_v;
      break;
  }

  const bool normalizes_qk =
      cfg.normalize_qk && (cfg.kernel == KernelKind::LinearAngular ||
                           cfg.kernel == KernelKind::Angular);
  if (normalizes_qk || cfg.kernel == KernelKind::Cosine) {
    r.norm_macs += (n_q + n_k) * d; // squared-norm accumulation
    r.div_ops += (n_q + n_k) * d;
  }
  if (cfg.row_normalize) {
    r.norm_macs += n_q * d; // Q against summed keys
    r.div_ops += n_q * d_v;
  }

  if (cfg.use_dwconv) {
    const std::uint64_t k = cfg.dwconv_k;
    r.dwconv_macs = cfg.grid_h != 0 ? n_k * d_v * k * k : n_k * d_v * k;
  }

  if (cfg.use_aux && !castled) {
    r.aux_macs = n_q * n_k * d + n_q * n_k * d_v;
    r.exp_ops += n_q * n_k;
    r.div_ops += n_q * n_k;
    if (cfg.aux_normalize) {
      r.norm_macs += (n_q + n_k) * d;
      r.div_ops += (n_q + n_k) * d;
    }
  }
  return r;
}

bool linear_beats_quadratic(std::size_t n_q, std::size_t n_k, std::size_t d, std::size_t d_v) {
  const std::uint64_t linear =
      static_cast<std::uint64_t>(n_k) * d * d_v + static_cast<std::uint64_t>(n_q) * d * d_v;
  const std::uint64_t quadratic =
      static_cast<std::uint64_t>(n_q) * n_k * d + static_cast<std::uint64_t>(n_q) * n_k * d_v;
  return linear < quadratic;
}

} // namespace castling
