#include "margingate/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "margingate/errors.hpp"
#include "margingate/rng.hpp"

namespace margingate {

void ModelSpec::validate() const {
  if (layers < 1 || heads < 1 || d_model < 1 || mlp_mult < 1) {
    throw InvalidArgument("ModelSpec: layers, heads, d_model and mlp_mult must be positive");
  }
  if (d_model % heads != 0) throw InvalidArgument("ModelSpec: d_model must be divisible by heads");
  if (vocab < 2) throw InvalidArgument("ModelSpec: vocab must be >= 2");
  if (max_positions < 1) throw InvalidArgument("ModelSpec: max_positions must be >= 1");
  if (!(embed_std > 0.0) || !std::isfinite(embed_std)) {
    throw InvalidArgument("ModelSpec: embed_std must be positive");
  }
}

void Matrix::prepare() {
  wide_t.resize(data.size());
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      wide_t[static_cast<std::size_t>(c) * rows + r] = at(r, c).to_float();
    }
  }
}

namespace {

Matrix draw_matrix(GaussianStream& g, int rows, int cols, double scale) {
  Matrix m;
  m.rows = rows;
  m.cols = cols;
  m.data.resize(static_cast<std::size_t>(rows) * cols);
  for (auto& x : m.data) x = round_to_bf16(static_cast<float>(g.next() * scale));
  m.prepare();
  return m;
}

std::vector<Bf16> unit_gain(int n) { return std::vector<Bf16>(static_cast<std::size_t>(n), round_to_bf16(1.0f)); }

// RMS norm with the mean square routed through the reduction plan.
void rms_norm(std::span<const float> x, std::span<const Bf16> gain, int chunks, std::span<float> out) {
  const ReductionPlan plan(x.size(), chunks);
  const float mean_sq = chunked_dot(x, x, plan) / static_cast<float>(x.size());
  const float inv = 1.0f / std::sqrt(mean_sq + 1e-5f);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = bf16_quantize((x[i] * inv) * gain[i].to_float());
}

void quantize_all(std::span<float> x) {
  for (float& v : x) v = bf16_quantize(v);
}

float silu(float u) {
  const double d = u;
  return static_cast<float>(d / (1.0 + std::exp(-d)));
}

}  // namespace

Weights build_model(const ModelSpec& spec) {
  spec.validate();
  GaussianStream g(spec.seed);
  const double linear = 1.0 / std::sqrt(static_cast<double>(spec.d_model));
  Weights w;
  w.spec = spec;
  w.token_embedding = draw_matrix(g, spec.vocab, spec.d_model, spec.embed_std);
  w.position_embedding = draw_matrix(g, spec.max_positions, spec.d_model, spec.embed_std);
  w.layers.resize(static_cast<std::size_t>(spec.layers));
  for (auto& layer : w.layers) {
    layer.wq = draw_matrix(g, spec.d_model, spec.d_model, linear);
    layer.wk = draw_matrix(g, spec.d_model, spec.d_model, linear);
    layer.wv = draw_matrix(g, spec.d_model, spec.d_model, linear);
    layer.wo = draw_matrix(g, spec.d_model, spec.d_model, linear);
    layer.w_in = draw_matrix(g, spec.hidden(), spec.d_model, linear);
    layer.w_out = draw_matrix(g, spec.d_model, spec.hidden(), linear);
    layer.attn_norm = unit_gain(spec.d_model);
    layer.mlp_norm = unit_gain(spec.d_model);
  }
  w.final_norm = unit_gain(spec.d_model);
  return w;
}

int argmax(std::span<const float> logits) {
  if (logits.empty()) throw InvalidArgument("argmax of an empty vector");
  int best = 0;
  for (std::size_t j = 1; j < logits.size(); ++j) {
    if (logits[j] > logits[best]) best = static_cast<int>(j);
  }
  return best;
}

StepOutput forward_step(const Weights& weights, const KVCache& cache, int row, int token,
                        int position, const NumericsProfile& profile, BatchContext batch,
                        ForwardProbe* probe) {
  const ModelSpec& spec = weights.spec;
  if (token < 0 || token >= spec.vocab) {
    throw InvalidArgument("forward_step: token " + std::to_string(token) + " outside vocab");
  }
  if (position < 0 || position >= spec.max_positions) {
    throw CapacityError("forward_step: position " + std::to_string(position) +
                        " exceeds max_positions " + std::to_string(spec.max_positions));
  }
  if (cache.layers() != spec.layers || cache.width() != spec.d_model) {
    throw InvalidArgument("forward_step: cache shape does not match the model");
  }

  const int chunks = profile.mode == NumericsMode::reduction_order
                         ? chunks_for_batch(profile, batch.batch_size)
                         : 1;
  const int d = spec.d_model;
  const int hd = spec.head_dim();
  const auto ud = static_cast<std::size_t>(d);

  // Attendable history: unmasked slots in storage order, then the new column.
  std::vector<int> slots;
  const int filled = cache.filled(row);
  slots.reserve(static_cast<std::size_t>(filled));
  for (int s = 0; s < filled; ++s) {
    if (!cache.is_masked(row, s)) slots.push_back(s);
  }
  const std::size_t n_ctx = slots.size() + 1;

  std::vector<float> x(ud), h(ud), q(ud), kcol(ud), vcol(ud), attn(ud), proj(ud);
  std::vector<float> up(static_cast<std::size_t>(spec.hidden()));
  std::vector<float> scores(n_ctx), probs(n_ctx), acc(static_cast<std::size_t>(hd)),
      tot(static_cast<std::size_t>(hd));
  const std::vector<float> ones(n_ctx, 1.0f);
  std::vector<float> key_buf(static_cast<std::size_t>(hd));
  std::vector<const Bf16*> k_rows(slots.size()), v_rows(slots.size());

  StepOutput out;
  out.columns = ColumnSet(spec.layers, d);

  {
    const auto te = weights.token_embedding.row(token);
    const auto pe = weights.position_embedding.row(position);
    for (int i = 0; i < d; ++i) x[i] = bf16_quantize(te[i].to_float() + pe[i].to_float());
  }

  const float score_scale = 1.0f / std::sqrt(static_cast<float>(hd));
  const ReductionPlan head_plan(static_cast<std::size_t>(hd), chunks);
  const ReductionPlan ctx_plan(n_ctx, chunks);

  for (int l = 0; l < spec.layers; ++l) {
    const LayerWeights& lw = weights.layers[l];
    rms_norm(x, lw.attn_norm, chunks, h);
    chunked_matvec_t(lw.wq.wide_t, ud, h, chunks, q);
    chunked_matvec_t(lw.wk.wide_t, ud, h, chunks, kcol);
    chunked_matvec_t(lw.wv.wide_t, ud, h, chunks, vcol);
    quantize_all(q);
    quantize_all(kcol);
    quantize_all(vcol);
    for (int i = 0; i < d; ++i) {
      out.columns.k[static_cast<std::size_t>(l) * ud + i] = round_to_bf16(kcol[i]);
      out.columns.v[static_cast<std::size_t>(l) * ud + i] = round_to_bf16(vcol[i]);
    }

    for (std::size_t p = 0; p < slots.size(); ++p) {
      k_rows[p] = cache.k(l, row, slots[p]).data();
      v_rows[p] = cache.v(l, row, slots[p]).data();
    }
    auto key_at = [&](std::size_t p, int i) -> float {
      return p < slots.size() ? k_rows[p][i].to_float() : kcol[i];
    };
    auto value_at = [&](std::size_t p, int i) -> float {
      return p < slots.size() ? v_rows[p][i].to_float() : vcol[i];
    };

    for (int head = 0; head < spec.heads; ++head) {
      const int base = head * hd;
      for (std::size_t p = 0; p < n_ctx; ++p) {
        for (int i = 0; i < hd; ++i) key_buf[i] = key_at(p, base + i);
        const float dot = chunked_dot(std::span<const float>(q.data() + base, static_cast<std::size_t>(hd)),
                                      std::span<const float>(key_buf), head_plan);
        scores[p] = bf16_quantize(dot * score_scale);
      }
      const float peak = *std::max_element(scores.begin(), scores.end());
      for (std::size_t p = 0; p < n_ctx; ++p) {
        probs[p] = bf16_quantize(static_cast<float>(std::exp(static_cast<double>(scores[p] - peak))));
      }
      const float norm = chunked_dot(std::span<const float>(probs), std::span<const float>(ones), ctx_plan);
      for (std::size_t p = 0; p < n_ctx; ++p) probs[p] = bf16_quantize(probs[p] / norm);
      if (probe != nullptr) {
        double sum = 0.0;
        for (float w : probs) sum += w;
        probe->max_softmax_sum_error = std::max(probe->max_softmax_sum_error, std::fabs(sum - 1.0));
        ++probe->softmax_rows;
      }
      // Weighted value sum, one independent chain per output dimension.
      for (int c = 0; c < ctx_plan.chunk_count(); ++c) {
        std::fill(acc.begin(), acc.end(), 0.0f);
        for (std::size_t p = ctx_plan.chunk_begin(c); p < ctx_plan.chunk_end(c); ++p) {
          for (int i = 0; i < hd; ++i) acc[i] += probs[p] * value_at(p, base + i);
        }
        for (int i = 0; i < hd; ++i) tot[i] = (c == 0) ? acc[i] : tot[i] + acc[i];
      }
      for (int i = 0; i < hd; ++i) attn[base + i] = bf16_quantize(tot[i]);
    }

    chunked_matvec_t(lw.wo.wide_t, ud, attn, chunks, proj);
    for (int i = 0; i < d; ++i) x[i] = bf16_quantize(x[i] + bf16_quantize(proj[i]));

    rms_norm(x, lw.mlp_norm, chunks, h);
    chunked_matvec_t(lw.w_in.wide_t, up.size(), h, chunks, up);
    for (float& u : up) u = bf16_quantize(silu(bf16_quantize(u)));
    chunked_matvec_t(lw.w_out.wide_t, ud, up, chunks, proj);
    for (int i = 0; i < d; ++i) x[i] = bf16_quantize(x[i] + bf16_quantize(proj[i]));
  }

  rms_norm(x, weights.final_norm, chunks, h);
  out.logits.resize(static_cast<std::size_t>(spec.vocab));
  chunked_matvec_t(weights.token_embedding.wide_t, out.logits.size(), h, chunks, out.logits);

  if (profile.mode == NumericsMode::injected_noise) {
    out.logits = inject_ulp_noise(out.logits, profile, batch.step, batch.row, batch.batch_size);
  }
  return out;
}

}  // namespace margingate
