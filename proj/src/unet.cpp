#include "fieldrecon/unet.hpp"

#include <cmath>

#include "fieldrecon/rng.hpp"

namespace fieldrecon {

int UNetConfig::padded(int extent) const {
  const int m = 1 << depth;
  return (extent + m - 1) / m * m;
}

void UNetConfig::validate() const {
  if (in_channels < 1) throw ParameterError("UNet needs at least one input channel");
  if (base_channels < 1 || depth < 0 || time_dim < 2 || time_dim % 2 != 0 || groups < 1) {
    throw ParameterError("invalid UNet widths");
  }
  if (static_cast<int>(channel_multipliers.size()) != depth + 1) {
    throw ParameterError("UNet needs depth + 1 channel multipliers");
  }
  for (int l = 0; l <= depth; ++l) {
    if (channel_multipliers[l] < 1 || width(l) % groups != 0) {
      throw ParameterError("level width " + std::to_string(width(l)) + " not divisible into " +
                           std::to_string(groups) + " groups");
    }
  }
}

template <typename T>
void sinusoidal_embedding(double fraction, int dim, std::span<T> out) {
  const int half = dim / 2;
  const double pos = 1000.0 * fraction;
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * k / half);
    out[k] = static_cast<T>(std::sin(pos * freq));
    out[k + half] = static_cast<T>(std::cos(pos * freq));
  }
}

template <typename T>
struct UNet<T>::Tape final : ScoreTape {
  int height = 0, width = 0;
  int padded_height = 0, padded_width = 0;
  std::vector<T> inv_sigma;
  Tensor<T> temb_raw, temb_pre, temb;
  std::vector<BlockTape> blocks;
  Tensor<T> head_input;
};

template <typename T>
typename UNet<T>::ConvBlock UNet<T>::make_block(int cin, int cout, bool timed, std::size_t& offset) const {
  ConvBlock b;
  b.cin = cin;
  b.cout = cout;
  b.timed = timed;
  b.weight = offset;
  offset += static_cast<std::size_t>(cout) * cin * 9;
  b.bias = offset;
  offset += cout;
  b.gamma = offset;
  offset += cout;
  b.beta = offset;
  offset += cout;
  if (timed) {
    b.time_weight = offset;
    offset += static_cast<std::size_t>(cout) * config_.time_dim;
    b.time_bias = offset;
    offset += cout;
  }
  return b;
}

template <typename T>
std::size_t UNet<T>::layout() {
  config_.validate();
  std::size_t off = 0;
  time_weight_ = off;
  off += static_cast<std::size_t>(config_.time_dim) * config_.time_dim;
  time_bias_ = off;
  off += config_.time_dim;
  int cin = config_.in_channels;
  down_.clear();
  for (int l = 0; l < config_.depth; ++l) {
    Level lv;
    lv.first = make_block(cin, config_.width(l), true, off);
    lv.second = make_block(config_.width(l), config_.width(l), false, off);
    down_.push_back(lv);
    cin = config_.width(l);
  }
  mid_.first = make_block(cin, config_.width(config_.depth), true, off);
  mid_.second = make_block(config_.width(config_.depth), config_.width(config_.depth), false, off);
  up_.assign(config_.depth, Level{});
  for (int l = config_.depth - 1; l >= 0; --l) {
    up_[l].first = make_block(config_.width(l + 1) + config_.width(l), config_.width(l), true, off);
    up_[l].second = make_block(config_.width(l), config_.width(l), false, off);
  }
  out_weight_ = off;
  off += static_cast<std::size_t>(config_.in_channels) * config_.width(0) * 9;
  out_bias_ = off;
  off += config_.in_channels;
  return off;
}

template <typename T>
UNet<T>::UNet(UNetConfig config, std::uint64_t seed) : config_(std::move(config)) {
  params_.assign(layout(), T(0));
  Rng rng(seed);
  auto init = [&](std::size_t offset, std::size_t n, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < n; ++i) params_[offset + i] = static_cast<T>(rng.uniform(-bound, bound));
  };
  auto init_block = [&](const ConvBlock& b) {
    init(b.weight, static_cast<std::size_t>(b.cout) * b.cin * 9, b.cin * 9);
    init(b.bias, b.cout, b.cin * 9);
    for (int c = 0; c < b.cout; ++c) params_[b.gamma + c] = T(1);
    if (b.timed) {
      init(b.time_weight, static_cast<std::size_t>(b.cout) * config_.time_dim, config_.time_dim);
      init(b.time_bias, b.cout, config_.time_dim);
    }
  };
  init(time_weight_, static_cast<std::size_t>(config_.time_dim) * config_.time_dim, config_.time_dim);
  init(time_bias_, config_.time_dim, config_.time_dim);
  for (const auto& lv : down_) {
    init_block(lv.first);
    init_block(lv.second);
  }
  init_block(mid_.first);
  init_block(mid_.second);
  for (int l = config_.depth - 1; l >= 0; --l) {
    init_block(up_[l].first);
    init_block(up_[l].second);
  }
  init(out_weight_, static_cast<std::size_t>(config_.in_channels) * config_.width(0) * 9, config_.width(0) * 9);
  init(out_bias_, config_.in_channels, config_.width(0) * 9);
}

template <typename T>
UNet<T>::UNet(UNetConfig config, std::vector<T> parameters) : config_(std::move(config)) {
  const std::size_t n = layout();
  if (parameters.size() != n) {
    throw ShapeError("UNet expects " + std::to_string(n) + " parameters, got " +
                     std::to_string(parameters.size()));
  }
  params_ = std::move(parameters);
}

template <typename T>
Tensor<T> UNet<T>::block_forward(const ConvBlock& b, const Tensor<T>& x, const Tensor<T>& temb,
                                 BlockTape* tape) const {
  Tensor<T> conv, normed, out;
  kernels::GroupStats<T> stats;
  kernels::conv3x3_forward<T>(x, view(b.weight, static_cast<std::size_t>(b.cout) * b.cin * 9),
                              view(b.bias, b.cout), b.cout, conv);
  kernels::group_norm_forward<T>(conv, config_.groups, view(b.gamma, b.cout), view(b.beta, b.cout),
                                 normed, stats);
  if (b.timed) {
    const int d = config_.time_dim;
    const std::size_t plane = normed.shape.plane();
    for (int n = 0; n < normed.batch; ++n) {
      const T* e = temb.sample(n).data();
      for (int c = 0; c < b.cout; ++c) {
        const T* w = params_.data() + b.time_weight + static_cast<std::size_t>(c) * d;
        T acc = params_[b.time_bias + c];
        for (int k = 0; k < d; ++k) acc += w[k] * e[k];
        T* p = normed.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) p[i] += acc;
      }
    }
  }
  kernels::silu_forward<T>(normed, out);
  if (tape) {
    tape->input = x;
    tape->conv = std::move(conv);
    tape->pre = std::move(normed);
    tape->stats = std::move(stats);
  }
  return out;
}

template <typename T>
Tensor<T> UNet<T>::block_backward(const ConvBlock& b, const BlockTape& tape, const Tensor<T>& temb,
                                  const Tensor<T>& dy, std::span<T> grads, Tensor<T>* dtemb) const {
  const bool want_params = !grads.empty();
  Tensor<T> dpre, dconv, dx;
  kernels::silu_backward<T>(tape.pre, dy, dpre);
  if (b.timed && want_params) {
    const int d = config_.time_dim;
    const std::size_t plane = dpre.shape.plane();
    for (int n = 0; n < dpre.batch; ++n) {
      const T* e = temb.sample(n).data();
      T* de = dtemb->sample(n).data();
      for (int c = 0; c < b.cout; ++c) {
        const T* p = dpre.plane(n, c);
        T g = 0;
        for (std::size_t i = 0; i < plane; ++i) g += p[i];
        grads[b.time_bias + c] += g;
        T* gw = grads.data() + b.time_weight + static_cast<std::size_t>(c) * d;
        const T* w = params_.data() + b.time_weight + static_cast<std::size_t>(c) * d;
        for (int k = 0; k < d; ++k) {
          gw[k] += g * e[k];
          de[k] += g * w[k];
        }
      }
    }
  }
  std::span<T> dgamma, dbeta, dweight, dbias;
  if (want_params) {
    dgamma = grads.subspan(b.gamma, b.cout);
    dbeta = grads.subspan(b.beta, b.cout);
    dweight = grads.subspan(b.weight, static_cast<std::size_t>(b.cout) * b.cin * 9);
    dbias = grads.subspan(b.bias, b.cout);
  }
  kernels::group_norm_backward<T>(tape.conv, config_.groups, view(b.gamma, b.cout), tape.stats, dpre,
                                  dconv, dgamma, dbeta);
  kernels::conv3x3_backward<T>(tape.input, view(b.weight, static_cast<std::size_t>(b.cout) * b.cin * 9),
                               b.cout, dconv, &dx, dweight, dbias);
  return dx;
}

template <typename T>
ScoreEvaluation<T> UNet<T>::evaluate(const Tensor<T>& x, std::span<const int> steps,
                                     const NoiseSchedule& sched, bool record) const {
  if (x.shape.channels != config_.in_channels) {
    throw ShapeError("score network expects " + std::to_string(config_.in_channels) +
                     " channels, got " + std::to_string(x.shape.channels));
  }
  if (steps.size() != static_cast<std::size_t>(x.batch)) throw ShapeError("one step index per batch item");
  auto tape = std::make_unique<Tape>();
  Tape* tp = record ? tape.get() : nullptr;
  const int n = x.batch;
  const int ph = config_.padded(x.shape.height), pw = config_.padded(x.shape.width);

  // Time embedding MLP.
  const int d = config_.time_dim;
  Tensor<T> raw(n, Shape{d, 1, 1}), pre(n, Shape{d, 1, 1}), temb;
  std::vector<T> inv_sigma(n);
  for (int i = 0; i < n; ++i) {
    sinusoidal_embedding<T>(static_cast<double>(steps[i]) / sched.steps, d, raw.sample(i));
    inv_sigma[i] = static_cast<T>(1.0 / sched.sigma_at(steps[i]));
    for (int o = 0; o < d; ++o) {
      T acc = params_[time_bias_ + o];
      const T* w = params_.data() + time_weight_ + static_cast<std::size_t>(o) * d;
      for (int k = 0; k < d; ++k) acc += w[k] * raw.sample(i)[k];
      pre.sample(i)[o] = acc;
    }
  }
  kernels::silu_forward<T>(pre, temb);

  if (tp) {
    tp->height = x.shape.height;
    tp->width = x.shape.width;
    tp->padded_height = ph;
    tp->padded_width = pw;
    tp->blocks.resize(static_cast<std::size_t>(4 * config_.depth + 2));
  }
  auto slot = [&](std::size_t i) { return tp ? &tp->blocks[i] : nullptr; };

  Tensor<T> h;
  kernels::pad_spatial<T>(x, ph, pw, h);
  std::vector<Tensor<T>> skips;
  std::size_t bi = 0;
  for (const auto& lv : down_) {
    h = block_forward(lv.first, h, temb, slot(bi++));
    h = block_forward(lv.second, h, temb, slot(bi++));
    skips.push_back(h);
    Tensor<T> pooled;
    kernels::avg_pool2_forward<T>(h, pooled);
    h = std::move(pooled);
  }
  h = block_forward(mid_.first, h, temb, slot(bi++));
  h = block_forward(mid_.second, h, temb, slot(bi++));
  for (int l = config_.depth - 1; l >= 0; --l) {
    Tensor<T> up, cat;
    kernels::upsample2_forward<T>(h, up);
    kernels::concat_channels<T>(up, skips[l], cat);
    h = block_forward(up_[l].first, cat, temb, slot(bi++));
    h = block_forward(up_[l].second, h, temb, slot(bi++));
  }
  Tensor<T> head, cropped;
  kernels::conv3x3_forward<T>(h, view(out_weight_, static_cast<std::size_t>(config_.in_channels) * config_.width(0) * 9),
                              view(out_bias_, config_.in_channels), config_.in_channels, head);
  kernels::crop_spatial<T>(head, x.shape.height, x.shape.width, cropped);
  for (int i = 0; i < n; ++i) {
    const auto in = x.sample(i);
    auto out = cropped.sample(i);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = out[k] * inv_sigma[i] - in[k];
  }

  ScoreEvaluation<T> result;
  result.score = std::move(cropped);
  if (tp) {
    tp->inv_sigma = std::move(inv_sigma);
    tp->temb_raw = std::move(raw);
    tp->temb_pre = std::move(pre);
    tp->temb = std::move(temb);
    tp->head_input = std::move(h);
    result.tape = std::move(tape);
  }
  return result;
}

template <typename T>
void UNet<T>::backward_impl(const Tape& tape, const Tensor<T>& grad_score, std::span<T> grad_params,
                            Tensor<T>* grad_input) const {
  const bool want_params = !grad_params.empty();
  if (want_params && grad_params.size() != params_.size()) throw ShapeError("gradient buffer size mismatch");
  const int n = grad_score.batch;
  Tensor<T> scaled = grad_score;
  for (int i = 0; i < n; ++i)
    for (auto& v : scaled.sample(i)) v *= tape.inv_sigma[i];
  Tensor<T> dhead;
  kernels::pad_spatial<T>(scaled, tape.padded_height, tape.padded_width, dhead);

  Tensor<T> dtemb(n, Shape{config_.time_dim, 1, 1});
  Tensor<T>* dtemb_ptr = want_params ? &dtemb : nullptr;
  Tensor<T> dh;
  std::span<T> dw, db;
  if (want_params) {
    dw = grad_params.subspan(out_weight_, static_cast<std::size_t>(config_.in_channels) * config_.width(0) * 9);
    db = grad_params.subspan(out_bias_, config_.in_channels);
  }
  kernels::conv3x3_backward<T>(tape.head_input,
                               view(out_weight_, static_cast<std::size_t>(config_.in_channels) * config_.width(0) * 9),
                               config_.in_channels, dhead, &dh, dw, db);

  std::size_t bi = tape.blocks.size();
  std::vector<Tensor<T>> dskips(config_.depth);
  for (int l = 0; l < config_.depth; ++l) {
    dh = block_backward(up_[l].second, tape.blocks[--bi], tape.temb, dh, grad_params, dtemb_ptr);
    Tensor<T> dcat = block_backward(up_[l].first, tape.blocks[--bi], tape.temb, dh, grad_params, dtemb_ptr);
    Tensor<T> dup;
    kernels::split_channels<T>(dcat, config_.width(l + 1), dup, dskips[l]);
    kernels::upsample2_backward<T>(dup, dh);
  }
  dh = block_backward(mid_.second, tape.blocks[--bi], tape.temb, dh, grad_params, dtemb_ptr);
  dh = block_backward(mid_.first, tape.blocks[--bi], tape.temb, dh, grad_params, dtemb_ptr);
  for (int l = config_.depth - 1; l >= 0; --l) {
    Tensor<T> dpool;
    kernels::avg_pool2_backward<T>(dh, dpool);
    for (std::size_t i = 0; i < dpool.data.size(); ++i) dpool.data[i] += dskips[l].data[i];
    dh = block_backward(down_[l].second, tape.blocks[--bi], tape.temb, dpool, grad_params, dtemb_ptr);
    dh = block_backward(down_[l].first, tape.blocks[--bi], tape.temb, dh, grad_params, dtemb_ptr);
  }
  if (grad_input) {
    kernels::crop_spatial<T>(dh, tape.height, tape.width, *grad_input);
    for (std::size_t i = 0; i < grad_input->data.size(); ++i) grad_input->data[i] -= grad_score.data[i];
  }

  if (want_params) {
    Tensor<T> dpre;
    kernels::silu_backward<T>(tape.temb_pre, dtemb, dpre);
    const int d = config_.time_dim;
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < d; ++o) {
        const T g = dpre.sample(i)[o];
        grad_params[time_bias_ + o] += g;
        T* gw = grad_params.data() + time_weight_ + static_cast<std::size_t>(o) * d;
        for (int k = 0; k < d; ++k) gw[k] += g * tape.temb_raw.sample(i)[k];
      }
  }
}

template <typename T>
Tensor<T> UNet<T>::input_vjp(const ScoreTape& tape, const Tensor<T>& grad_score) const {
  Tensor<T> gi;
  backward_impl(dynamic_cast<const Tape&>(tape), grad_score, {}, &gi);
  return gi;
}

template <typename T>
void UNet<T>::backward(const ScoreTape& tape, const Tensor<T>& grad_score, std::span<T> grad_params,
                       Tensor<T>* grad_input) const {
  backward_impl(dynamic_cast<const Tape&>(tape), grad_score, grad_params, grad_input);
}

template class UNet<float>;
template class UNet<double>;
template void sinusoidal_embedding<float>(double, int, std::span<float>);
template void sinusoidal_embedding<double>(double, int, std::span<double>);

}  // namespace fieldrecon
