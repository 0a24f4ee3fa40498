#include "casp/toy_transformer.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "casp/error.hpp"

namespace casp {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

Eigen::VectorXd row_rstd(const Eigen::MatrixXd& centered) {
  const double d = static_cast<double>(centered.cols());
  return ((centered.array().square().rowwise().sum() / d) + kNormEps).rsqrt().matrix();
}

// Backward of the parameter-free LayerNorm.
Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& x, const Eigen::MatrixXd& dy) {
  const Eigen::MatrixXd centered = x.colwise() - x.rowwise().mean();
  const Eigen::VectorXd rstd = row_rstd(centered);
  const Eigen::MatrixXd xhat = centered.array().colwise() * rstd.array();
  const Eigen::VectorXd mean_dy = dy.rowwise().mean();
  const Eigen::VectorXd mean_dyx = (dy.array() * xhat.array()).rowwise().mean();
  Eigen::MatrixXd dx = dy;
  dx.colwise() -= mean_dy;
  dx -= (xhat.array().colwise() * mean_dyx.array()).matrix();
  return dx.array().colwise() * rstd.array();
}

Eigen::MatrixXd gelu_grad(const Eigen::MatrixXd& z) {
  return z.unaryExpr([](double v) {
    const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
  });
}

void check_tokens(const DenseModel& model, std::span<const std::uint32_t> tokens) {
  if (tokens.empty()) throw Error("empty token sequence");
  if (tokens.size() > model.config.max_seq_len) {
    throw Error("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                std::to_string(model.config.max_seq_len));
  }
  for (auto t : tokens) {
    if (t >= model.config.vocab_size) {
      throw Error("token " + std::to_string(t) + " out of vocab (size " +
                  std::to_string(model.config.vocab_size) + ")");
    }
  }
}

Eigen::MatrixXd causal_softmax(const Eigen::MatrixXd& logits) {
  const Eigen::Index n = logits.rows();
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = logits.row(i).head(i + 1);
    const Eigen::RowVectorXd e = (row.array() - row.maxCoeff()).exp();
    p.row(i).head(i + 1) = e / e.sum();
  }
  return p;
}

// Log-softmax rows of logits.
Eigen::MatrixXd log_softmax(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out = logits.colwise() - logits.rowwise().maxCoeff();
  const Eigen::VectorXd lse = out.array().exp().rowwise().sum().log();
  out.colwise() -= lse;
  return out;
}

}  // namespace

DenseModel materialize(const ModelCheckpoint& model) {
  validate(model);
  DenseModel dense;
  dense.config = model.config;
  dense.embed = model.embed.cast<double>();
  dense.pos = model.pos.cast<double>();
  dense.layers.reserve(model.layers.size());
  for (const auto& layer : model.layers) {
    dense.layers.push_back({materialize(layer.w_q), materialize(layer.w_k), materialize(layer.w_v),
                            materialize(layer.w_o), materialize(layer.mlp_up),
                            materialize(layer.mlp_down)});
  }
  return dense;
}

Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd centered = x.colwise() - x.rowwise().mean();
  return centered.array().colwise() * row_rstd(centered).array();
}

Eigen::MatrixXd gelu(const Eigen::MatrixXd& z) {
  return z.unaryExpr([](double v) {
    return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  });
}

BlockTrace block_forward(const DenseLayer& layer, const Eigen::MatrixXd& x, std::uint32_t n_heads) {
  BlockTrace t;
  t.x_in = x;
  t.attn_in = layer_norm(x);
  t.q = t.attn_in * layer.w_q;
  t.k = t.attn_in * layer.w_k;
  t.v = t.attn_in * layer.w_v;
  const Eigen::Index d = x.cols();
  const Eigen::Index dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  t.ctx.resize(x.rows(), d);
  t.probs.reserve(n_heads);
  for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(n_heads); ++h) {
    const Eigen::MatrixXd logits =
        t.q.middleCols(h * dh, dh) * t.k.middleCols(h * dh, dh).transpose() * inv_sqrt;
    t.probs.push_back(causal_softmax(logits));
    t.ctx.middleCols(h * dh, dh) = t.probs.back() * t.v.middleCols(h * dh, dh);
  }
  t.h1 = x + t.ctx * layer.w_o;
  t.mlp_in = layer_norm(t.h1);
  t.pre_act = t.mlp_in * layer.mlp_up;
  t.mlp_hidden = gelu(t.pre_act);
  t.x_out = t.h1 + t.mlp_hidden * layer.mlp_down;
  return t;
}

Eigen::MatrixXd embed_tokens(const DenseModel& model, std::span<const std::uint32_t> tokens) {
  check_tokens(model, tokens);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(tokens.size()), model.embed.cols());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    x.row(r) = model.embed.row(tokens[i]) + model.pos.row(r);
  }
  return x;
}

Eigen::MatrixXd sequence_logits(const DenseModel& model, std::span<const std::uint32_t> tokens) {
  Eigen::MatrixXd x = embed_tokens(model, tokens);
  for (const auto& layer : model.layers) x = block_forward(layer, x, model.config.n_heads).x_out;
  return layer_norm(x) * model.embed.transpose();
}

double sequence_loss(const DenseModel& model, std::span<const std::uint32_t> tokens, DenseModel* grad) {
  if (tokens.size() < 2) throw Error("sequence length < 2: no next-token targets");
  Eigen::MatrixXd x = embed_tokens(model, tokens);
  std::vector<BlockTrace> traces;
  traces.reserve(model.layers.size());
  for (const auto& layer : model.layers) {
    traces.push_back(block_forward(layer, x, model.config.n_heads));
    x = traces.back().x_out;
  }
  const Eigen::MatrixXd uf = layer_norm(x);
  const Eigen::MatrixXd logp = log_softmax(uf * model.embed.transpose());
  const auto targets = static_cast<Eigen::Index>(tokens.size() - 1);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < targets; ++i) loss -= logp(i, tokens[static_cast<std::size_t>(i) + 1]);
  loss /= static_cast<double>(targets);
  if (grad == nullptr) return loss;

  Eigen::MatrixXd dlogits = Eigen::MatrixXd::Zero(logp.rows(), logp.cols());
  dlogits.topRows(targets) = logp.topRows(targets).array().exp();
  for (Eigen::Index i = 0; i < targets; ++i) dlogits(i, tokens[static_cast<std::size_t>(i) + 1]) -= 1.0;
  dlogits /= static_cast<double>(targets);

  grad->embed += dlogits.transpose() * uf;
  Eigen::MatrixXd dx = layer_norm_backward(x, dlogits * model.embed);

  const std::uint32_t n_heads = model.config.n_heads;
  const Eigen::Index d = x.cols();
  const Eigen::Index dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t li = model.layers.size(); li-- > 0;) {
    const DenseLayer& w = model.layers[li];
    DenseLayer& g = grad->layers[li];
    const BlockTrace& t = traces[li];

    g.mlp_down += t.mlp_hidden.transpose() * dx;
    const Eigen::MatrixXd dpre = (dx * w.mlp_down.transpose()).cwiseProduct(gelu_grad(t.pre_act));
    g.mlp_up += t.mlp_in.transpose() * dpre;
    Eigen::MatrixXd dh1 = dx + layer_norm_backward(t.h1, dpre * w.mlp_up.transpose());

    g.w_o += t.ctx.transpose() * dh1;
    const Eigen::MatrixXd dctx = dh1 * w.w_o.transpose();
    Eigen::MatrixXd dq(t.q.rows(), d), dk(t.k.rows(), d), dv(t.v.rows(), d);
    for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(n_heads); ++h) {
      const Eigen::MatrixXd& p = t.probs[static_cast<std::size_t>(h)];
      const auto dc = dctx.middleCols(h * dh, dh);
      const Eigen::MatrixXd dp = dc * t.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh) = p.transpose() * dc;
      const Eigen::VectorXd inner = (dp.array() * p.array()).rowwise().sum();
      const Eigen::MatrixXd dy = p.array() * (dp.colwise() - inner).array();
      dq.middleCols(h * dh, dh) = dy * t.k.middleCols(h * dh, dh) * inv_sqrt;
      dk.middleCols(h * dh, dh) = dy.transpose() * t.q.middleCols(h * dh, dh) * inv_sqrt;
    }
    g.w_q += t.attn_in.transpose() * dq;
    g.w_k += t.attn_in.transpose() * dk;
    g.w_v += t.attn_in.transpose() * dv;
    const Eigen::MatrixXd dattn = dq * w.w_q.transpose() + dk * w.w_k.transpose() + dv * w.w_v.transpose();
    dx = dh1 + layer_norm_backward(t.x_in, dattn);
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    grad->embed.row(tokens[i]) += dx.row(r);
    grad->pos.row(r) += dx.row(r);
  }
  return loss;
}

double mean_nll(const DenseModel& model, const CalibrationSet& data) {
  if (data.sequences.empty()) throw Error("held-out set is empty");
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : data.sequences) {
    if (seq.size() < 2) throw Error("sequence length < 2: no next-token targets");
    const Eigen::MatrixXd logp = log_softmax(sequence_logits(model, seq));
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      total -= logp(static_cast<Eigen::Index>(i), seq[i + 1]);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double evaluate_ppl(const DenseModel& model, const CalibrationSet& heldout) {
  return std::exp(mean_nll(model, heldout));
}

double evaluate_ppl(const ModelCheckpoint& model, const CalibrationSet& heldout) {
  return evaluate_ppl(materialize(model), heldout);
}

DenseModel zeros_like(const DenseModel& model) {
  DenseModel z;
  z.config = model.config;
  z.embed = Eigen::MatrixXd::Zero(model.embed.rows(), model.embed.cols());
  z.pos = Eigen::MatrixXd::Zero(model.pos.rows(), model.pos.cols());
  for (const auto& l : model.layers) {
    z.layers.push_back({Eigen::MatrixXd::Zero(l.w_q.rows(), l.w_q.cols()),
                        Eigen::MatrixXd::Zero(l.w_k.rows(), l.w_k.cols()),
                        Eigen::MatrixXd::Zero(l.w_v.rows(), l.w_v.cols()),
                        Eigen::MatrixXd::Zero(l.w_o.rows(), l.w_o.cols()),
                        Eigen::MatrixXd::Zero(l.mlp_up.rows(), l.mlp_up.cols()),
                        Eigen::MatrixXd::Zero(l.mlp_down.rows(), l.mlp_down.cols())});
  }
  return z;
}

namespace {

template <typename Fn>
void for_each_param(DenseModel& a, DenseModel& b, DenseModel& c, DenseModel& e, Fn&& fn) {
  fn(a.embed, b.embed, c.embed, e.embed);
  fn(a.pos, b.pos, c.pos, e.pos);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    auto& la = a.layers[l];
    auto& lb = b.layers[l];
    auto& lc = c.layers[l];
    auto& le = e.layers[l];
    fn(la.w_q, lb.w_q, lc.w_q, le.w_q);
    fn(la.w_k, lb.w_k, lc.w_k, le.w_k);
    fn(la.w_v, lb.w_v, lc.w_v, le.w_v);
    fn(la.w_o, lb.w_o, lc.w_o, le.w_o);
    fn(la.mlp_up, lb.mlp_up, lc.mlp_up, le.mlp_up);
    fn(la.mlp_down, lb.mlp_down, lc.mlp_down, le.mlp_down);
  }
}

Weights to_weights(const Eigen::MatrixXd& m) { return m.cast<float>(); }

}  // namespace

TrainReport train_toy_model(ModelCheckpoint& model, const CalibrationSet& corpus,
                            const TrainOptions& options) {
  for (const auto& layer : model.layers) {
    for (std::size_t i = 0; i < LayerWeights::kNames.size(); ++i) {
      if (!std::holds_alternative<Weights>(layer.slot(i))) {
        throw Error("training requires an all-dense model");
      }
    }
  }
  validate(corpus, model.config.vocab_size);
  if (options.batch == 0) throw Error("batch size must be positive");

  DenseModel params = materialize(model);
  DenseModel m1 = zeros_like(params);
  DenseModel m2 = zeros_like(params);
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.sequences.size() - 1);
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kAdamEps = 1e-8;

  TrainReport report;
  report.initial_loss = mean_nll(params, corpus);
  for (std::uint32_t step = 1; step <= options.steps; ++step) {
    DenseModel grad = zeros_like(params);
    for (std::uint32_t b = 0; b < options.batch; ++b) sequence_loss(params, corpus.sequences[pick(rng)], &grad);
    const double scale = 1.0 / static_cast<double>(options.batch);
    // Cosine decay to 10% of the base rate.
    const double progress = static_cast<double>(step - 1) / std::max(1u, options.steps);
    const double lr = options.learning_rate * (0.55 + 0.45 * std::cos(M_PI * progress));
    const double c1 = 1.0 - std::pow(kBeta1, step);
    const double c2 = 1.0 - std::pow(kBeta2, step);
    for_each_param(params, grad, m1, m2,
                   [&](Eigen::MatrixXd& p, Eigen::MatrixXd& g, Eigen::MatrixXd& a, Eigen::MatrixXd& v) {
                     g *= scale;
                     a = kBeta1 * a + (1.0 - kBeta1) * g;
                     v = kBeta2 * v + (1.0 - kBeta2) * g.cwiseAbs2();
                     p.array() -= lr * (a.array() / c1) / ((v.array() / c2).sqrt() + kAdamEps);
                   });
  }

  model.embed = to_weights(params.embed);
  model.pos = to_weights(params.pos);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& src = params.layers[l];
    auto& dst = model.layers[l];
    dst.w_q = to_weights(src.w_q);
    dst.w_k = to_weights(src.w_k);
    dst.w_v = to_weights(src.w_v);
    dst.w_o = to_weights(src.w_o);
    dst.mlp_up = to_weights(src.mlp_up);
    dst.mlp_down = to_weights(src.mlp_down);
  }
  report.final_loss = mean_nll(materialize(model), corpus);
  return report;
}

std::vector<LayerActivations> forward_collect(const ModelCheckpoint& model, const CalibrationSet& calib) {
  validate(calib, model.config.vocab_size);
  const DenseModel dense = materialize(model);
  const auto total = static_cast<Eigen::Index>(calib.sequences.size() * calib.seq_len);
  const Eigen::Index d = dense.config.d;
  const Eigen::Index ff = dense.config.d_ff;
  std::vector<LayerActivations> acts(dense.layers.size());
  std::vector<TokenKind> kinds;
  kinds.reserve(static_cast<std::size_t>(total));
  for (const auto& seq : calib.sequences) {
    for (auto t : seq) kinds.push_back(token_kind(t, dense.config.vocab_size));
  }
  for (auto& a : acts) {
    a.seq_len = calib.seq_len;
    a.x_in.x.resize(total, d);
    a.x_out.x.resize(total, d);
    a.attn_in.resize(total, d);
    a.attn_ctx.resize(total, d);
    a.mlp_in.resize(total, d);
    a.mlp_hidden.resize(total, ff);
    a.x_in.token_kinds = kinds;
    a.x_out.token_kinds = kinds;
  }
  const auto n = static_cast<Eigen::Index>(calib.seq_len);
  for (std::size_t s = 0; s < calib.sequences.size(); ++s) {
    Eigen::MatrixXd x = embed_tokens(dense, calib.sequences[s]);
    const Eigen::Index row = static_cast<Eigen::Index>(s) * n;
    for (std::size_t l = 0; l < dense.layers.size(); ++l) {
      BlockTrace t = block_forward(dense.layers[l], x, dense.config.n_heads);
      auto& a = acts[l];
      a.x_in.x.middleRows(row, n) = t.x_in;
      a.x_out.x.middleRows(row, n) = t.x_out;
      a.attn_in.middleRows(row, n) = t.attn_in;
      a.attn_ctx.middleRows(row, n) = t.ctx;
      a.mlp_in.middleRows(row, n) = t.mlp_in;
      a.mlp_hidden.middleRows(row, n) = t.mlp_hidden;
      x = std::move(t.x_out);
    }
  }
  return acts;
}

}  // namespace casp

namespace casp {

CalibrationSet mixed_vision_corpus(std::uint32_t count, std::uint32_t seq_len, std::uint32_t vocab_size,
                                   std::uint64_t seed) {
  constexpr std::array<double, 4> kRatios{0.0, 0.25, 0.5, 0.75};
  CalibrationSet out;
  out.seq_len = seq_len;
  for (std::size_t r = 0; r < kRatios.size(); ++r) {
    SyntheticCorpusOptions gen;
    gen.count = (count + static_cast<std::uint32_t>(kRatios.size() - 1 - r)) / kRatios.size();
    if (gen.count == 0) continue;
    gen.seq_len = seq_len;
    gen.vocab_size = vocab_size;
    gen.vision_ratio = kRatios[r];
    gen.seed = seed * kRatios.size() + r;
    auto part = generate_synthetic_corpus(gen);
    for (auto& s : part.sequences) out.sequences.push_back(std::move(s));
  }
  return out;
}

ModelCheckpoint build_toy_model(const ToyModelOptions& options, TrainReport* report) {
  ModelCheckpoint model = make_toy_model(options.config, options.seed);
  if (options.train.steps > 0) {
    const CalibrationSet corpus = mixed_vision_corpus(options.corpus_count, options.config.max_seq_len,
                                                      options.config.vocab_size, options.seed ^ 0x5eedull);
    TrainOptions train = options.train;
    train.seed = options.seed;
    const TrainReport r = train_toy_model(model, corpus, train);
    if (report != nullptr) *report = r;
  }
  return model;
}

}  // namespace casp
