// Six-layer convolutional autoencoder: an upfeature conv, strided encoder
// convs, transposed decoder convs, and a downfeature conv back to the input
// channel count. Trained by plain SGD+momentum to overfit a small image set;
// per-layer hidden activations are exposed for feature-space translation.
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "augdet/data.hpp"
#include "augdet/rng.hpp"
#include "augdet/tensor.hpp"

namespace augdet {

struct ConvergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AEConfig {
  std::vector<int> encoder_channels{64, 128, 256};
  std::vector<int> decoder_channels{128, 64};
  int kernel_size = 3;
  int stride_per_level = 2;
  int input_channels = 1;
  double leaky_slope = 0.1;
  double lr = 0.05;
  double momentum = 0.9;
  double lr_decay = 0.5;     // multiplier applied every lr_decay_every steps
  int lr_decay_every = 0;    // 0 disables decay
  int max_steps = 4000;
  double loss_threshold = 0.01;
  int batch_size = 0;  // 0 = full batch
  int check_every = 25;
};

namespace detail {

struct AELayer {
  bool transposed = false;
  int stride = 1;
  int pad = 0;
  bool activated = true;
};

}  // namespace detail

struct AEModel {
  AEConfig config;
  std::vector<detail::AELayer> layers;
  std::vector<Parameter> weights;  // w,b per layer, in layer order

  int layer_count() const { return static_cast<int>(layers.size()); }

  // product of encoder strides; input dims must divide it
  int stride_product() const {
    int s = 1;
    for (std::size_t i = 0; i < config.encoder_channels.size() - 1; ++i)
      s *= config.stride_per_level;
    return s;
  }

  std::vector<Parameter*> params() {
    std::vector<Parameter*> out;
    for (auto& p : weights) out.push_back(&p);
    return out;
  }

  // One conv (or transposed conv) plus activation on every layer but the last.
  Tensor apply_layer(int k, const Tensor& h) const {
    const auto& d = layers[k];
    const Tensor& w = weights[2 * k].tensor;
    const Tensor& b = weights[2 * k + 1].tensor;
    Tensor out = d.transposed ? conv2d_transposed(h, w, b, d.stride, d.pad)
                              : conv2d(h, w, b, d.stride, d.pad);
    return d.activated ? leaky_relu(out, config.leaky_slope) : out;
  }
};

inline AEModel make_ae_model(const AEConfig& cfg, Rng& rng) {
  if (cfg.encoder_channels.empty() || cfg.decoder_channels.empty())
    throw std::runtime_error("ae: empty channel lists");
  AEModel m;
  m.config = cfg;
  const int k = cfg.kernel_size;
  const int p = k / 2;
  const int s = cfg.stride_per_level;
  auto add_conv = [&](const std::string& name, int cin, int cout, int stride,
                      int pad, bool activated) {
    m.layers.push_back(detail::AELayer{false, stride, pad, activated});
    m.weights.emplace_back(
        name + ".w", glorot_uniform({cout, cin, k, k}, cin * k * k,
                                    cout * k * k, rng));
    m.weights.emplace_back(name + ".b", Tensor({cout}, 0.0, true));
  };
  // Transposed decoder convs use kernel == stride with no padding, an exact
  // stride-fold upsampling, since the supplement leaves kernel shapes open.
  auto add_deconv = [&](const std::string& name, int cin, int cout) {
    m.layers.push_back(detail::AELayer{true, s, 0, true});
    m.weights.emplace_back(
        name + ".w", glorot_uniform({cin, cout, s, s}, cin * s * s,
                                    cout * s * s, rng));
    m.weights.emplace_back(name + ".b", Tensor({cout}, 0.0, true));
  };

  add_conv("up", cfg.input_channels, cfg.encoder_channels[0], 1, p, true);
  for (std::size_t i = 1; i < cfg.encoder_channels.size(); ++i)
    add_conv("enc" + std::to_string(i), cfg.encoder_channels[i - 1],
             cfg.encoder_channels[i], s, p, true);
  int cin = cfg.encoder_channels.back();
  for (std::size_t i = 0; i < cfg.decoder_channels.size(); ++i) {
    add_deconv("dec" + std::to_string(i + 1), cin, cfg.decoder_channels[i]);
    cin = cfg.decoder_channels[i];
  }
  add_conv("down", cin, cfg.input_channels, 1, p, false);
  return m;
}

struct FeatureStack {
  std::vector<Tensor> features;  // one per layer, encoder -> decoder order
  std::vector<int> source_shape;
};

struct AEForwardResult {
  Tensor reconstruction;  // same shape as the input batch
  FeatureStack stack;
};

namespace detail {

inline void check_ae_dims(const AEModel& m, int h, int w) {
  const int sp = m.stride_product();
  if (h % sp != 0 || w % sp != 0)
    throw ShapeError("ae_forward: image dims (" + std::to_string(h) + "," +
                     std::to_string(w) + ") must be divisible by " +
                     std::to_string(sp));
}

inline AEForwardResult ae_forward_batch(const AEModel& m, const Tensor& batch) {
  check_ae_dims(m, batch.dim(2), batch.dim(3));
  AEForwardResult out;
  out.stack.source_shape = batch.shape();
  Tensor h = batch;
  for (int k = 0; k < m.layer_count(); ++k) {
    h = m.apply_layer(k, h);
    out.stack.features.push_back(h);
  }
  out.reconstruction = h;
  return out;
}

}  // namespace detail

// image: (1,H,W) single-channel sample or (N,C,H,W) batch.
inline AEForwardResult ae_forward(const AEModel& m, const Tensor& image) {
  if (image.rank() == 3)
    return detail::ae_forward_batch(
        m, reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)}));
  if (image.rank() == 4) return detail::ae_forward_batch(m, image);
  throw ShapeError("ae_forward: (1,H,W) or (N,C,H,W) input required");
}

struct AETrainResult {
  AEModel model;
  bool converged = false;
  int steps_run = 0;
  double final_loss = 0.0;
  std::vector<std::pair<int, double>> curve;  // (step, mean train L1)
};

namespace detail {

inline Tensor stack_images(const std::vector<ImageSample>& images,
                           const std::vector<std::size_t>& idx) {
  const int h = images[idx[0]].height(), w = images[idx[0]].width();
  Tensor batch({static_cast<int>(idx.size()), 1, h, w}, 0.0);
  auto& bv = batch.value_mut();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& px = images[idx[i]].pixels.value();
    std::copy(px.begin(), px.end(), bv.begin() + i * px.size());
  }
  return batch;
}

}  // namespace detail

// Overfits the model on the given images. Full-batch by default; stops when
// the mean train L1 drops below config.loss_threshold or max_steps is hit,
// and reports which via `converged`.
inline AETrainResult train_overfit(const std::vector<ImageSample>& images,
                                   const AEConfig& cfg, Rng& rng) {
  if (images.empty()) throw std::runtime_error("train_overfit: no images");
  const int h = images[0].height(), w = images[0].width();
  for (const auto& s : images)
    if (s.height() != h || s.width() != w)
      throw ShapeError("train_overfit: images must share one size");

  AETrainResult result;
  result.model = make_ae_model(cfg, rng);
  detail::check_ae_dims(result.model, h, w);
  auto params = result.model.params();

  std::vector<std::size_t> all_idx(images.size());
  for (std::size_t i = 0; i < all_idx.size(); ++i) all_idx[i] = i;
  const Tensor full_batch = detail::stack_images(images, all_idx);

  const bool full = cfg.batch_size <= 0 ||
                    cfg.batch_size >= static_cast<int>(images.size());
  std::vector<std::size_t> order = all_idx;
  std::size_t cursor = order.size();  // triggers a shuffle on first use

  double lr = cfg.lr;
  for (int step = 1; step <= cfg.max_steps; ++step) {
    if (cfg.lr_decay_every > 0 && step > 1 &&
        (step - 1) % cfg.lr_decay_every == 0)
      lr *= cfg.lr_decay;

    double train_loss;
    if (full) {
      auto fwd = detail::ae_forward_batch(result.model, full_batch);
      Tensor loss = l1_loss(fwd.reconstruction, full_batch);
      train_loss = loss.item();
      if (!std::isfinite(train_loss))
        throw std::runtime_error("train_overfit: non-finite loss at step " +
                                 std::to_string(step));
      result.curve.emplace_back(step, train_loss);
      if (train_loss < cfg.loss_threshold) {
        result.converged = true;
        result.steps_run = step - 1;
        result.final_loss = train_loss;
        return result;
      }
      loss.backward();
      sgd_step(params, lr, cfg.momentum);
    } else {
      std::vector<std::size_t> batch_idx;
      for (int i = 0; i < cfg.batch_size; ++i) {
        if (cursor == order.size()) {
          rng.shuffle(order);
          cursor = 0;
        }
        batch_idx.push_back(order[cursor++]);
      }
      const Tensor batch = detail::stack_images(images, batch_idx);
      auto fwd = detail::ae_forward_batch(result.model, batch);
      Tensor loss = l1_loss(fwd.reconstruction, batch);
      const double batch_loss = loss.item();
      if (!std::isfinite(batch_loss))
        throw std::runtime_error("train_overfit: non-finite loss at step " +
                                 std::to_string(step));
      loss.backward();
      sgd_step(params, lr, cfg.momentum);
      if (step % cfg.check_every == 0 || step == cfg.max_steps) {
        auto eval = detail::ae_forward_batch(result.model, full_batch);
        train_loss = l1_loss(eval.reconstruction, full_batch).item();
        result.curve.emplace_back(step, train_loss);
        if (train_loss < cfg.loss_threshold) {
          result.converged = true;
          result.steps_run = step;
          result.final_loss = train_loss;
          return result;
        }
      }
    }
  }
  auto eval = detail::ae_forward_batch(result.model, full_batch);
  result.final_loss = l1_loss(eval.reconstruction, full_batch).item();
  result.steps_run = cfg.max_steps;
  result.converged = result.final_loss < cfg.loss_threshold;
  return result;
}

inline std::string curve_csv(const std::vector<std::pair<int, double>>& curve) {
  std::string out = "step,loss\n";
  char buf[64];
  for (const auto& [step, loss] : curve) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g\n", step, loss);
    out += buf;
  }
  return out;
}

}  // namespace augdet
