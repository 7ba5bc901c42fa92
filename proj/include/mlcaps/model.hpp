#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mlcaps/capsule.hpp"
#include "mlcaps/hierarchy.hpp"
#include "mlcaps/ops.hpp"
#include "mlcaps/tensor.hpp"

namespace mlcaps {

struct LossConstants {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double gamma = 0.5;
  double tau = 0.0005;
};

struct ModelConfig {
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  std::vector<std::size_t> conv_filters{32, 64};
  std::size_t primary_capsule_channels = 32;
  std::size_t primary_dim = 8;
  std::size_t secondary_dim = 16;
  std::size_t routing_iters = 3;
  bool differentiate_coupling = false;
  double secondary_init_std = 0.01;
  std::vector<std::size_t> decoder_hidden{512, 512};
  std::vector<std::size_t> level_classes;  // K_n, coarse -> fine
  LossConstants loss;

  std::size_t levels() const { return level_classes.size(); }
  std::size_t image_size() const { return channels * height * width; }
  std::size_t num_primary_capsules() const { return primary_capsule_channels * height * width; }

  void check() const {
    if (level_classes.size() < 2) throw config_error("model: need at least 2 label levels");
    for (auto k : level_classes)
      if (k == 0) throw config_error("model: level with zero classes");
    if (conv_filters.empty()) throw config_error("model: empty conv stack");
    if (decoder_hidden.size() != 2) throw config_error("model: decoder heads have exactly 2 hidden layers");
    if (channels == 0 || height == 0 || width == 0) throw config_error("model: empty input shape");
    if (primary_capsule_channels == 0 || primary_dim == 0 || secondary_dim == 0)
      throw config_error("model: capsule sizes must be positive");
    if (routing_iters < 1) throw config_error("model: routing_iters must be >= 1");
    for (double c : {loss.m_plus, loss.m_minus, loss.gamma})
      if (!(c > 0.0 && c < 1.0)) throw config_error("model: margin constants must lie in (0,1)");
    if (!(loss.tau >= 0.0 && loss.tau <= 1.0)) throw config_error("model: tau must lie in [0,1]");
  }
};

inline ModelConfig with_tree(ModelConfig cfg, const LabelTree& tree) {
  cfg.level_classes = tree.class_counts();
  return cfg;
}

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct ForwardOutput {
  std::vector<Tensor<T>> capsules;  // per level [B, K_n, D]
  std::vector<Tensor<T>> scores;    // per level [B, K_n], capsule lengths
  Tensor<T> reconstruction;         // [B, C, H, W]
};

// Row-wise one-hot of the largest score.
template <typename T>
Tensor<T> argmax_mask(const Tensor<T>& scores) {
  const std::size_t rows = scores.dim(0), cols = scores.dim(1);
  std::vector<T> out(rows * cols, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = scores.data().subspan(r * cols, cols);
    out[r * cols + static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin())] = T(1);
  }
  return Tensor<T>(scores.shape(), std::move(out));
}

template <typename T>
std::vector<MultiLabel> predict_labels(const std::vector<Tensor<T>>& scores) {
  const std::size_t batch = scores.at(0).dim(0);
  std::vector<MultiLabel> out(batch);
  for (const auto& s : scores) {
    const std::size_t cols = s.dim(1);
    for (std::size_t b = 0; b < batch; ++b) {
      auto row = s.data().subspan(b * cols, cols);
      out[b].ids.push_back(
          static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

// Reported class probabilities: softmax over capsule lengths.
template <typename T>
Tensor<T> class_probabilities(const Tensor<T>& scores) {
  return softmax(scores.detach(), 1);
}

// Hinge loss on capsule lengths, summed over classes and averaged over the
// batch. Soft (mixed) targets are accepted row-wise.
namespace detail {
// max(0, v) that keeps NaN.
template <typename T>
T hinge(T v) {
  return v > T(0) || std::isnan(v) ? v : T(0);
}
}  // namespace detail

template <typename T>
Tensor<T> margin_loss(const Tensor<T>& lengths, const Tensor<T>& targets, const LossConstants& c) {
  if (lengths.rank() != 2 || lengths.shape() != targets.shape())
    throw dimension_error("margin_loss: lengths " + shape_str(lengths.shape()) + " vs targets " +
                          shape_str(targets.shape()));
  const T mp = T(c.m_plus), mm = T(c.m_minus), gamma = T(c.gamma);
  const T inv_b = T(1) / static_cast<T>(lengths.dim(0));
  T total = T(0);
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    const T x = lengths[i], t = targets[i];
    const T lo = detail::hinge(mp - x), hi = detail::hinge(x - mm);
    total += t * lo * lo + gamma * (T(1) - t) * hi * hi;
  }
  return make_result<T>({1}, {total * inv_b}, "margin_loss", {lengths, targets},
                        [mp, mm, gamma, inv_b](Node<T>& self) {
                          auto& pl = *self.parents[0];
                          auto& pt = *self.parents[1];
                          const T g0 = self.grad[0] * inv_b;
                          if (pl.requires_grad) {
                            auto g = pl.ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              const T x = pl.data[i], t = pt.data[i];
                              const T lo = detail::hinge(mp - x), hi = detail::hinge(x - mm);
                              g[i] += g0 * (-T(2) * t * lo + T(2) * gamma * (T(1) - t) * hi);
                            }
                          }
                          if (pt.requires_grad) {
                            auto g = pt.ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              const T x = pl.data[i];
                              const T lo = detail::hinge(mp - x), hi = detail::hinge(x - mm);
                              g[i] += g0 * (lo * lo - gamma * hi * hi);
                            }
                          }
                        });
}

// Squared L2 distance per instance, averaged over the batch.
template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& x, const Tensor<T>& x_hat) {
  if (x.shape() != x_hat.shape())
    throw dimension_error("reconstruction_loss: " + shape_str(x.shape()) + " vs " +
                          shape_str(x_hat.shape()));
  const T inv_b = T(1) / static_cast<T>(x.dim(0));
  T total = T(0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T d = x[i] - x_hat[i];
    total += d * d;
  }
  return make_result<T>({1}, {total * inv_b}, "reconstruction_loss", {x, x_hat},
                        [inv_b](Node<T>& self) {
                          auto& px = *self.parents[0];
                          auto& ph = *self.parents[1];
                          const T g0 = T(2) * self.grad[0] * inv_b;
                          if (px.requires_grad) {
                            auto g = px.ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += g0 * (px.data[i] - ph.data[i]);
                          }
                          if (ph.requires_grad) {
                            auto g = ph.ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] -= g0 * (px.data[i] - ph.data[i]);
                          }
                        });
}

// L_T = tau * L_R + (1 - tau) * sum_n lambda_n * L_n
template <typename T>
Tensor<T> total_loss(const std::vector<Tensor<T>>& level_losses, const Tensor<T>& recon,
                     const std::vector<double>& lambdas, double tau) {
  if (level_losses.empty() || level_losses.size() != lambdas.size())
    throw dimension_error("total_loss: " + std::to_string(level_losses.size()) +
                          " level losses vs " + std::to_string(lambdas.size()) + " weights");
  Tensor<T> weighted = scale(level_losses[0], T(lambdas[0]));
  for (std::size_t n = 1; n < level_losses.size(); ++n)
    weighted = add(weighted, scale(level_losses[n], T(lambdas[n])));
  return add(scale(recon, T(tau)), scale(weighted, T(1.0 - tau)));
}

template <typename T>
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.check();
    std::mt19937_64 rng(seed);
    std::size_t in_ch = config_.channels;
    for (std::size_t i = 0; i < config_.conv_filters.size(); ++i) {
      const std::size_t f = config_.conv_filters[i];
      convs_.push_back({add_param("conv" + std::to_string(i) + ".kernel",
                                  uniform({f, in_ch, 3, 3}, std::sqrt(6.0 / double(in_ch * 9)), rng)),
                        add_param("conv" + std::to_string(i) + ".bias", Tensor<T>(Shape{f}))});
      in_ch = f;
    }
    const std::size_t pc = config_.primary_capsule_channels * config_.primary_dim;
    primary_.capsule_channels = config_.primary_capsule_channels;
    primary_.dim = config_.primary_dim;
    primary_.kernel = add_param("primary.kernel",
                                uniform({pc, in_ch, 3, 3}, std::sqrt(3.0 / double(in_ch * 9)), rng));
    primary_.bias = add_param("primary.bias", Tensor<T>(Shape{pc}));
    const std::size_t num_in = config_.num_primary_capsules();
    for (std::size_t n = 0; n < config_.levels(); ++n) {
      SecondaryCapsuleLayer<T> layer;
      layer.routing_iters = config_.routing_iters;
      layer.differentiate_coupling = config_.differentiate_coupling;
      layer.weight = add_param("secondary" + std::to_string(n) + ".weight",
                               normal({num_in, config_.level_classes[n], config_.primary_dim,
                                       config_.secondary_dim},
                                      config_.secondary_init_std, rng));
      secondary_.push_back(layer);
    }
    const std::size_t h1 = config_.decoder_hidden[0], h2 = config_.decoder_hidden[1];
    for (std::size_t n = 0; n < config_.levels(); ++n) {
      const std::string p = "decoder" + std::to_string(n);
      const std::size_t in = config_.level_classes[n] * config_.secondary_dim;
      DecoderHead head;
      head.w1 = add_param(p + ".fc0.weight", glorot(in, h1, rng));
      head.b1 = add_param(p + ".fc0.bias", Tensor<T>(Shape{h1}));
      head.w2 = add_param(p + ".fc1.weight", glorot(h1, h2, rng));
      head.b2 = add_param(p + ".fc1.bias", Tensor<T>(Shape{h2}));
      heads_.push_back(head);
    }
    const std::size_t img = config_.image_size();
    out_w_ = add_param("decoder.out.weight", glorot(config_.levels() * h2, img, rng));
    out_b_ = add_param("decoder.out.bias", Tensor<T>(Shape{img}));
  }

  const ModelConfig& config() const { return config_; }
  std::vector<NamedParameter<T>>& parameters() { return params_; }
  const std::vector<NamedParameter<T>>& parameters() const { return params_; }

  Tensor<T> features(const Tensor<T>& x) const {
    check_input(x);
    Tensor<T> h = x;
    for (const auto& c : convs_) h = relu(conv2d(h, c.kernel, c.bias));
    return h;
  }

  Tensor<T> primary_capsules(const Tensor<T>& x) const { return primary_.forward(features(x)); }

  // Per-level capsules and lengths; the primary capsules are computed once
  // and shared by every level.
  void encode(const Tensor<T>& x, ForwardOutput<T>& out) const {
    const Tensor<T> primary = primary_capsules(x);
    out.capsules.clear();
    out.scores.clear();
    for (const auto& layer : secondary_) {
      Tensor<T> v = layer.forward(primary);
      out.scores.push_back(l2_norm(v, 2));
      out.capsules.push_back(std::move(v));
    }
  }

  // Masks are [B, K_n] rows selecting the capsules fed to each decoder head.
  Tensor<T> decode(const std::vector<Tensor<T>>& capsules, const std::vector<Tensor<T>>& masks) const {
    if (capsules.size() != heads_.size() || masks.size() != heads_.size())
      throw dimension_error("decode: expected one capsule tensor and one mask per level");
    const std::size_t batch = capsules[0].dim(0);
    std::vector<Tensor<T>> parts;
    for (std::size_t n = 0; n < heads_.size(); ++n) {
      const auto& h = heads_[n];
      Tensor<T> flat = reshape(scale_vectors(capsules[n], masks[n]),
                               {batch, config_.level_classes[n] * config_.secondary_dim});
      parts.push_back(relu(dense(relu(dense(flat, h.w1, h.b1)), h.w2, h.b2)));
    }
    Tensor<T> img = sigmoid(dense(concat(parts, 1), out_w_, out_b_));
    return reshape(img, {batch, config_.channels, config_.height, config_.width});
  }

  // Decoder masks come from `targets` when given (training), otherwise from
  // the per-level argmax (evaluation).
  ForwardOutput<T> forward(const Tensor<T>& x, const std::vector<Tensor<T>>* targets = nullptr) const {
    ForwardOutput<T> out;
    encode(x, out);
    std::vector<Tensor<T>> masks;
    if (targets) {
      if (targets->size() != out.scores.size()) throw dimension_error("forward: one target per level");
      for (std::size_t n = 0; n < targets->size(); ++n) {
        if ((*targets)[n].shape() != out.scores[n].shape())
          throw dimension_error("forward: target " + shape_str((*targets)[n].shape()) +
                                " vs scores " + shape_str(out.scores[n].shape()));
        masks.push_back((*targets)[n].detach());
      }
    } else {
      for (const auto& s : out.scores) masks.push_back(argmax_mask(s));
    }
    out.reconstruction = decode(out.capsules, masks);
    return out;
  }

  std::size_t decoder_parameter_count() const {
    std::size_t total = out_w_.size() + out_b_.size();
    for (const auto& h : heads_) total += h.w1.size() + h.b1.size() + h.w2.size() + h.b2.size();
    return total;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.tensor.size();
    return total;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  Tensor<T>& parameter(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return p.tensor;
    throw std::out_of_range("model: no parameter named " + name);
  }

 private:
  struct ConvLayer {
    Tensor<T> kernel, bias;
  };
  struct DecoderHead {
    Tensor<T> w1, b1, w2, b2;
  };

  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != config_.channels || x.dim(2) != config_.height ||
        x.dim(3) != config_.width)
      throw dimension_error("model: input " + shape_str(x.shape()) + " does not match [B," +
                            std::to_string(config_.channels) + "," + std::to_string(config_.height) +
                            "," + std::to_string(config_.width) + "]");
  }

  Tensor<T> add_param(std::string name, Tensor<T> t) {
    Tensor<T> p(t.shape(), std::vector<T>(t.data().begin(), t.data().end()), true);
    params_.push_back({std::move(name), p});
    return p;
  }

  static Tensor<T> uniform(Shape shape, double limit, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-limit, limit);
    std::vector<T> v(shape_size(shape));
    for (auto& x : v) x = T(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v));
  }

  static Tensor<T> normal(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(shape_size(shape));
    for (auto& x : v) x = T(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v));
  }

  static Tensor<T> glorot(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    return uniform({in, out}, std::sqrt(6.0 / double(in + out)), rng);
  }

  ModelConfig config_;
  std::vector<NamedParameter<T>> params_;
  std::vector<ConvLayer> convs_;
  PrimaryCapsuleLayer<T> primary_;
  std::vector<SecondaryCapsuleLayer<T>> secondary_;
  std::vector<DecoderHead> heads_;
  Tensor<T> out_w_, out_b_;
};

}  // namespace mlcaps
