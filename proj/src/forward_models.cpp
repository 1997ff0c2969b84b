#include "fieldrecon/forward_models.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "fieldrecon/training.hpp"

namespace fieldrecon {

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMapMat = Eigen::Map<const Mat<T>>;
template <typename T>
using MapMat = Eigen::Map<Mat<T>>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using ConstMapVec = Eigen::Map<const Vec<T>>;
template <typename T>
using MapVec = Eigen::Map<Vec<T>>;

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void fnv_bytes(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}

void fnv_u32(std::uint64_t& h, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  fnv_bytes(h, b, 4);
}

}  // namespace

void SensorLayout::validate() const {
  if (height < 1 || width < 1) throw LayoutError("sensor layout has an empty grid");
  std::set<std::pair<int, int>> seen;
  for (const auto& p : positions) {
    if (p.row < 0 || p.row >= height || p.col < 0 || p.col >= width) {
      throw LayoutError("sensor (" + std::to_string(p.row) + ", " + std::to_string(p.col) +
                        ") outside the " + std::to_string(height) + "x" + std::to_string(width) + " grid");
    }
    if (!seen.insert({p.row, p.col}).second) {
      throw LayoutError("sensor (" + std::to_string(p.row) + ", " + std::to_string(p.col) + ") repeated");
    }
  }
}

std::uint64_t SensorLayout::hash() const {
  std::uint64_t h = kFnvOffset;
  fnv_u32(h, static_cast<std::uint32_t>(height));
  fnv_u32(h, static_cast<std::uint32_t>(width));
  fnv_bytes(h, quantity.data(), quantity.size());
  fnv_u32(h, static_cast<std::uint32_t>(positions.size()));
  for (const auto& p : positions) {
    fnv_u32(h, static_cast<std::uint32_t>(p.row));
    fnv_u32(h, static_cast<std::uint32_t>(p.col));
  }
  return h;
}

SensorLayout SensorLayout::subset(std::span<const int> indices) const {
  SensorLayout out{height, width, quantity, {}};
  for (int i : indices) {
    if (i < 0 || i >= size()) throw LayoutError("sensor index " + std::to_string(i) + " out of range");
    out.positions.push_back(positions[i]);
  }
  return out;
}

std::vector<float> SensorLayout::read(const Field& field, int channel) const {
  validate();
  if (field.shape.height != height || field.shape.width != width) {
    throw ShapeError("layout grid " + std::to_string(height) + "x" + std::to_string(width) +
                     " does not match field " + field.shape.str());
  }
  if (channel < 0 || channel >= field.shape.channels) throw ShapeError("channel index out of range");
  std::vector<float> y;
  y.reserve(positions.size());
  for (const auto& p : positions) y.push_back(field.at(channel, p.row, p.col));
  return y;
}

const char* to_string(ForwardKind kind) {
  switch (kind) {
    case ForwardKind::direct_selection:
      return "DS";
    case ForwardKind::channel_selection:
      return "CS";
    case ForwardKind::surrogate:
      return "NN";
  }
  return "?";
}

ForwardKind parse_forward_kind(const std::string& name) {
  std::string u = name;
  std::transform(u.begin(), u.end(), u.begin(), [](unsigned char c) { return std::toupper(c); });
  if (u == "DS") return ForwardKind::direct_selection;
  if (u == "CS") return ForwardKind::channel_selection;
  if (u == "NN") return ForwardKind::surrogate;
  throw ConfigError("unknown forward model '" + name + "' (expected DS, CS or NN)");
}

int required_score_channels(ForwardKind kind) { return kind == ForwardKind::channel_selection ? 2 : 1; }

template <typename T>
SelectionOperator<T>::SelectionOperator(ForwardKind kind, SensorLayout layout, Shape input, int channel)
    : kind_(kind), layout_(std::move(layout)), input_(input), channel_(channel) {
  layout_.validate();
  if (layout_.height != input.height || layout_.width != input.width) {
    throw ShapeError("layout grid does not match field " + input.str());
  }
  if (channel < 0 || channel >= input.channels) throw ShapeError("selected channel out of range");
  index_.reserve(layout_.positions.size());
  for (const auto& p : layout_.positions) {
    index_.push_back(static_cast<std::size_t>(channel) * input.plane() +
                     static_cast<std::size_t>(p.row) * input.width + p.col);
  }
}

template <typename T>
void SelectionOperator<T>::apply(std::span<const T> x, std::span<T> y) const {
  if (x.size() != input_.size() || y.size() != index_.size()) throw ShapeError("selection operand size");
  for (std::size_t i = 0; i < index_.size(); ++i) y[i] = x[index_[i]];
}

template <typename T>
void SelectionOperator<T>::vjp_add(std::span<const T>, std::span<const T> g, std::span<T> grad_x) const {
  if (grad_x.size() != input_.size() || g.size() != index_.size()) throw ShapeError("selection operand size");
  for (std::size_t i = 0; i < index_.size(); ++i) grad_x[index_[i]] += g[i];
}

template <typename T>
std::shared_ptr<SelectionOperator<T>> make_direct_selection(const SensorLayout& layout,
                                                            const std::string& target_quantity) {
  if (layout.quantity != target_quantity) {
    throw LayoutError("direct selection needs sensors measuring the target quantity (sensors read '" +
                      layout.quantity + "', target is '" + target_quantity + "')");
  }
  return std::make_shared<SelectionOperator<T>>(ForwardKind::direct_selection, layout,
                                                Shape{1, layout.height, layout.width}, 0);
}

template <typename T>
std::shared_ptr<SelectionOperator<T>> make_channel_selection(const SensorLayout& layout,
                                                             const std::vector<std::string>& tags) {
  if (tags.size() != 2) {
    throw ShapeError("channel selection needs a two-channel field, got " + std::to_string(tags.size()));
  }
  const auto it = std::find(tags.begin(), tags.end(), layout.quantity);
  if (it == tags.end()) throw LayoutError("no field channel carries sensor quantity '" + layout.quantity + "'");
  return std::make_shared<SelectionOperator<T>>(ForwardKind::channel_selection, layout,
                                                Shape{2, layout.height, layout.width},
                                                static_cast<int>(it - tags.begin()));
}

std::vector<float> ds_apply(const Field& x0_hat, const SensorLayout& layout) {
  if (x0_hat.shape.channels != 1) throw ShapeError("direct selection expects a one-channel field");
  return layout.read(x0_hat, 0);
}

std::vector<float> cs_apply(const Field& x0_hat, const SensorLayout& layout) {
  if (x0_hat.shape.channels != 2) throw ShapeError("channel selection expects a two-channel field");
  int c = x0_hat.find_channel(layout.quantity);
  if (c < 0) {
    // Untagged fields follow the (stress, strain) channel order.
    if (!x0_hat.channel_tags.empty()) throw LayoutError("no channel tagged '" + layout.quantity + "'");
    c = layout.quantity == kStrainTag ? 1 : 0;
  }
  return layout.read(x0_hat, c);
}

template <typename T>
MlpSurrogate<T>::MlpSurrogate(int inputs, int hidden, int outputs, std::uint64_t seed)
    : inputs_(inputs), hidden_(hidden), outputs_(outputs) {
  if (inputs < 1 || hidden < 1 || outputs < 1) throw ParameterError("surrogate dimensions must be positive");
  params_.resize(b2() + outputs_);
  Rng rng(seed);
  const double a1 = 1.0 / std::sqrt(static_cast<double>(inputs_));
  const double a2 = 1.0 / std::sqrt(static_cast<double>(hidden_));
  for (std::size_t i = w1(); i < w2(); ++i) params_[i] = static_cast<T>(rng.uniform(-a1, a1));
  for (std::size_t i = w2(); i < params_.size(); ++i) params_[i] = static_cast<T>(rng.uniform(-a2, a2));
}

template <typename T>
MlpSurrogate<T>::MlpSurrogate(int inputs, int hidden, int outputs, std::vector<T> parameters)
    : inputs_(inputs), hidden_(hidden), outputs_(outputs), params_(std::move(parameters)) {
  if (inputs < 1 || hidden < 1 || outputs < 1) throw ParameterError("surrogate dimensions must be positive");
  if (params_.size() != b2() + outputs_) throw ShapeError("surrogate parameter count mismatch");
}

template <typename T>
void MlpSurrogate<T>::forward(std::span<const T> x, std::span<T> y) const {
  if (static_cast<int>(x.size()) != inputs_ || static_cast<int>(y.size()) != outputs_) {
    throw ShapeError("surrogate expects " + std::to_string(inputs_) + " inputs and " +
                     std::to_string(outputs_) + " outputs");
  }
  ConstMapMat<T> W1(params_.data() + w1(), hidden_, inputs_);
  ConstMapVec<T> B1(params_.data() + b1(), hidden_);
  ConstMapMat<T> W2(params_.data() + w2(), outputs_, hidden_);
  ConstMapVec<T> B2(params_.data() + b2(), outputs_);
  const Vec<T> h = (W1 * ConstMapVec<T>(x.data(), inputs_) + B1).cwiseMax(T(0));
  MapVec<T>(y.data(), outputs_) = (W2 * h + B2).cwiseMax(T(0));
}

template <typename T>
std::vector<T> MlpSurrogate<T>::forward(std::span<const T> x) const {
  std::vector<T> y(static_cast<std::size_t>(outputs_));
  forward(x, y);
  return y;
}

template <typename T>
void MlpSurrogate<T>::backward(std::span<const T> x, std::span<const T> g, std::span<T> grad_params,
                               std::span<T> grad_x) const {
  if (static_cast<int>(x.size()) != inputs_ || static_cast<int>(g.size()) != outputs_) {
    throw ShapeError("surrogate backward operand size");
  }
  ConstMapMat<T> W1(params_.data() + w1(), hidden_, inputs_);
  ConstMapVec<T> B1(params_.data() + b1(), hidden_);
  ConstMapMat<T> W2(params_.data() + w2(), outputs_, hidden_);
  ConstMapVec<T> B2(params_.data() + b2(), outputs_);
  ConstMapVec<T> xv(x.data(), inputs_);
  const Vec<T> a1 = W1 * xv + B1;
  const Vec<T> h = a1.cwiseMax(T(0));
  const Vec<T> a2 = W2 * h + B2;
  const Vec<T> d2 = (a2.array() > T(0)).select(ConstMapVec<T>(g.data(), outputs_).array(), T(0)).matrix();
  const Vec<T> d1 = (a1.array() > T(0)).select((W2.transpose() * d2).array(), T(0)).matrix();
  if (!grad_params.empty()) {
    if (grad_params.size() != params_.size()) throw ShapeError("surrogate gradient size");
    MapMat<T>(grad_params.data() + w1(), hidden_, inputs_).noalias() += d1 * xv.transpose();
    MapVec<T>(grad_params.data() + b1(), hidden_) += d1;
    MapMat<T>(grad_params.data() + w2(), outputs_, hidden_).noalias() += d2 * h.transpose();
    MapVec<T>(grad_params.data() + b2(), outputs_) += d2;
  }
  if (!grad_x.empty()) {
    if (static_cast<int>(grad_x.size()) != inputs_) throw ShapeError("surrogate input gradient size");
    MapVec<T>(grad_x.data(), inputs_).noalias() += W1.transpose() * d1;
  }
}

template <typename T>
SurrogateOperator<T>::SurrogateOperator(MlpSurrogate<T> mlp, Shape input, std::vector<int> outputs)
    : mlp_(std::move(mlp)), input_(input), outputs_(std::move(outputs)) {
  if (input.channels != 1 || static_cast<int>(input.size()) != mlp_.inputs()) {
    throw ShapeError("surrogate input " + std::to_string(mlp_.inputs()) + " does not match field " +
                     input.str());
  }
  if (outputs_.empty()) {
    outputs_.resize(static_cast<std::size_t>(mlp_.outputs()));
    std::iota(outputs_.begin(), outputs_.end(), 0);
  }
  for (int o : outputs_) {
    if (o < 0 || o >= mlp_.outputs()) throw LayoutError("surrogate output index out of range");
  }
}

template <typename T>
void SurrogateOperator<T>::apply(std::span<const T> x, std::span<T> y) const {
  if (y.size() != outputs_.size()) throw ShapeError("surrogate reading size");
  const auto full = mlp_.forward(x);
  for (std::size_t i = 0; i < outputs_.size(); ++i) y[i] = full[outputs_[i]];
}

template <typename T>
void SurrogateOperator<T>::vjp_add(std::span<const T> x, std::span<const T> g, std::span<T> grad_x) const {
  if (g.size() != outputs_.size()) throw ShapeError("surrogate reading size");
  std::vector<T> full(static_cast<std::size_t>(mlp_.outputs()), T(0));
  for (std::size_t i = 0; i < outputs_.size(); ++i) full[outputs_[i]] += g[i];
  mlp_.backward(x, full, {}, grad_x);
}

template <typename T>
std::shared_ptr<SurrogateOperator<T>> make_surrogate_operator(const SurrogateModel& model,
                                                              std::vector<int> outputs) {
  return std::make_shared<SurrogateOperator<T>>(model.mlp.cast<T>(), Shape{1, model.height, model.width},
                                                std::move(outputs));
}

std::vector<float> nn_apply(const MlpSurrogate<float>& surrogate, const Field& x0_hat) {
  if (x0_hat.shape.channels != 1 || static_cast<int>(x0_hat.data.size()) != surrogate.inputs()) {
    throw ShapeError("surrogate expects a one-channel field with " + std::to_string(surrogate.inputs()) +
                     " cells, got " + x0_hat.shape.str());
  }
  return surrogate.forward(x0_hat.data);
}

namespace {

struct Batch {
  Mat<float> x, y;
};

Batch gather(std::span<const Field> inputs, std::span<const std::vector<float>> readings,
             std::span<const std::size_t> rows) {
  const auto nin = static_cast<Eigen::Index>(inputs.front().data.size());
  const auto nout = static_cast<Eigen::Index>(readings.front().size());
  Batch b{Mat<float>(static_cast<Eigen::Index>(rows.size()), nin),
          Mat<float>(static_cast<Eigen::Index>(rows.size()), nout)};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    b.x.row(static_cast<Eigen::Index>(i)) = ConstMapVec<float>(inputs[rows[i]].data.data(), nin).transpose();
    b.y.row(static_cast<Eigen::Index>(i)) = ConstMapVec<float>(readings[rows[i]].data(), nout).transpose();
  }
  return b;
}

// Column sums and squared norm in a fixed order: Eigen's vectorised reductions
// peel to the nearest aligned address, so their rounding follows the allocation.
void column_sums(const Mat<float>& m, float* out) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const float* c = m.data() + j * m.rows();
    float s = 0.0f;
    for (Eigen::Index i = 0; i < m.rows(); ++i) s += c[i];
    out[j] = s;
  }
}

double squared_norm(const Mat<float>& m) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < m.size(); ++i) s += static_cast<double>(m.data()[i]) * m.data()[i];
  return s;
}

// Mean squared error over all outputs of a batch; fills grad when non-null.
double batch_loss(const MlpSurrogate<float>& mlp, const Batch& b, std::vector<float>* grad) {
  const auto p = mlp.parameters();
  const int nin = mlp.inputs(), nh = mlp.hidden(), nout = mlp.outputs();
  ConstMapMat<float> W1(p.data(), nh, nin);
  ConstMapVec<float> B1(p.data() + static_cast<std::size_t>(nh) * nin, nh);
  const std::size_t w2 = static_cast<std::size_t>(nh) * nin + nh;
  ConstMapMat<float> W2(p.data() + w2, nout, nh);
  ConstMapVec<float> B2(p.data() + w2 + static_cast<std::size_t>(nout) * nh, nout);
  const Mat<float> a1 = (b.x * W1.transpose()).rowwise() + B1.transpose();
  const Mat<float> h = a1.cwiseMax(0.0f);
  const Mat<float> a2 = (h * W2.transpose()).rowwise() + B2.transpose();
  const Mat<float> r = a2.cwiseMax(0.0f) - b.y;
  const double count = static_cast<double>(r.size());
  const double loss = squared_norm(r) / count;
  if (grad) {
    grad->assign(p.size(), 0.0f);
    const Mat<float> d2 = (a2.array() > 0.0f).select(r.array() * static_cast<float>(2.0 / count), 0.0f).matrix();
    const Mat<float> d1 = (a1.array() > 0.0f).select((d2 * W2).array(), 0.0f).matrix();
    MapMat<float>(grad->data(), nh, nin).noalias() = d1.transpose() * b.x;
    column_sums(d1, grad->data() + static_cast<std::size_t>(nh) * nin);
    MapMat<float>(grad->data() + w2, nout, nh).noalias() = d2.transpose() * h;
    column_sums(d2, grad->data() + w2 + static_cast<std::size_t>(nout) * nh);
  }
  return loss;
}

double relative_error(const MlpSurrogate<float>& mlp, const Batch& b) {
  double num = 0.0, den = 0.0;
  std::vector<float> y(static_cast<std::size_t>(mlp.outputs()));
  for (Eigen::Index i = 0; i < b.x.rows(); ++i) {
    const Vec<float> xi = b.x.row(i).transpose();
    mlp.forward(std::span<const float>(xi.data(), static_cast<std::size_t>(xi.size())), y);
    for (int k = 0; k < mlp.outputs(); ++k) {
      const double d = static_cast<double>(y[k]) - b.y(i, k);
      num += d * d;
      den += static_cast<double>(b.y(i, k)) * b.y(i, k);
    }
  }
  return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

}  // namespace

SurrogateTrainResult train_surrogate(std::span<const Field> inputs, std::span<const std::vector<float>> readings,
                                     std::span<const int> groups, const SurrogateTrainOptions& options) {
  if (inputs.empty()) throw ParameterError("surrogate training set is empty");
  if (readings.size() != inputs.size() || (!groups.empty() && groups.size() != inputs.size())) {
    throw ShapeError("surrogate inputs, readings and groups differ in length");
  }
  if (options.epochs < 0 || options.batch_size < 1 || options.hidden < 1) {
    throw ParameterError("invalid surrogate training options");
  }
  const std::size_t nin = inputs.front().data.size(), nout = readings.front().size();
  if (nout == 0) throw ParameterError("surrogate needs at least one reading");
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].shape.channels != 1 || inputs[i].data.size() != nin || readings[i].size() != nout) {
      throw ShapeError("surrogate training pair " + std::to_string(i) + " has inconsistent size");
    }
  }

  // Hold out whole groups, chosen by a seeded shuffle of the distinct group ids.
  std::vector<int> ids;
  if (!groups.empty()) {
    ids.assign(groups.begin(), groups.end());
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  }
  std::set<int> held_out;
  if (ids.size() >= 2 && options.validation_fraction > 0.0) {
    Rng split_rng = Rng::substream(options.seed, 0);
    split_rng.shuffle(ids);
    const auto n_val = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(options.validation_fraction * static_cast<double>(ids.size()))), 1,
        ids.size() - 1);
    held_out.insert(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
  }
  std::vector<std::size_t> train_rows, val_rows;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    (!groups.empty() && held_out.count(groups[i]) ? val_rows : train_rows).push_back(i);
  }

  MlpSurrogate<float> mlp(static_cast<int>(nin), options.hidden, static_cast<int>(nout),
                          Rng::derive_seed(options.seed, 1));
  {
    // Output biases start at the mean training target so no output ReLU begins dead.
    auto p = mlp.mutable_parameters();
    const std::size_t b2 = p.size() - nout;
    for (std::size_t k = 0; k < nout; ++k) {
      double sum = 0.0;
      for (std::size_t r : train_rows) sum += readings[r][k];
      p[b2 + k] = static_cast<float>(sum / static_cast<double>(std::max<std::size_t>(train_rows.size(), 1)));
    }
  }
  Adam<float> adam(mlp.parameters().size(), AdamOptions{.learning_rate = options.learning_rate});
  Rng shuffle_rng = Rng::substream(options.seed, 2);
  const Batch val = val_rows.empty() ? Batch{} : gather(inputs, readings, val_rows);
  SurrogateTrainResult result;
  std::vector<float> grad;
  std::vector<std::size_t> order = train_rows;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double total = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      const auto batch = gather(inputs, readings, std::span<const std::size_t>(order).subspan(start, end - start));
      const double loss = batch_loss(mlp, batch, &grad);
      if (!std::isfinite(loss)) throw TrainingError("non-finite surrogate loss", adam.steps());
      adam.step(mlp.mutable_parameters(), grad);
      total += loss * static_cast<double>(end - start);
      seen += end - start;
    }
    result.loss_trace.push_back(total / static_cast<double>(std::max<std::size_t>(seen, 1)));
    if (options.on_epoch) {
      options.on_epoch(epoch, result.loss_trace.back(), val_rows.empty() ? 0.0 : batch_loss(mlp, val, nullptr));
    }
  }
  const Batch train = gather(inputs, readings, train_rows);
  result.train_loss = batch_loss(mlp, train, nullptr);
  result.validation_loss = val_rows.empty() ? result.train_loss : batch_loss(mlp, val, nullptr);
  result.validation_relative_error = relative_error(mlp, val_rows.empty() ? train : val);
  result.mlp = std::move(mlp);
  return result;
}

#define FIELDRECON_INSTANTIATE(T)                                                                          \
  template class SelectionOperator<T>;                                                                    \
  template class MlpSurrogate<T>;                                                                         \
  template class SurrogateOperator<T>;                                                                    \
  template std::shared_ptr<SelectionOperator<T>> make_direct_selection<T>(const SensorLayout&,            \
                                                                          const std::string&);            \
  template std::shared_ptr<SelectionOperator<T>> make_channel_selection<T>(const SensorLayout&,           \
                                                                           const std::vector<std::string>&); \
  template std::shared_ptr<SurrogateOperator<T>> make_surrogate_operator<T>(const SurrogateModel&,        \
                                                                            std::vector<int>);

FIELDRECON_INSTANTIATE(float)
FIELDRECON_INSTANTIATE(double)

}  // namespace fieldrecon
