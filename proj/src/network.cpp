#include "bayesbeat/network.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "bayesbeat/kvconfig.hpp"

namespace bayesbeat {

namespace {

constexpr std::size_t kMinStrictParams = 162'000;
constexpr std::size_t kMaxStrictParams = 198'000;


}  // namespace

NetworkConfig NetworkConfig::bayesbeat() {
  NetworkConfig c;
  c.stages = {{24, 7, 2, false}, {24, 7, 2, false}, {48, 7, 2, false},
              {48, 5, 0, true},  {56, 5, 0, true},  {72, 5, 0, true},
              {80, 5, 0, true},  {96, 5, 0, true},  {96, 5, 0, true}};
  return c;
}

NetworkConfig NetworkConfig::tiny(std::size_t stages, std::size_t channels, std::size_t input_length) {
  NetworkConfig c;
  c.strict = false;
  c.input_length = input_length;
  c.hidden = channels;
  for (std::size_t i = 0; i < stages; ++i) c.stages.push_back({channels, 3, i == 0 ? std::size_t{2} : 0, i > 0});
  return c;
}

void NetworkConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("network config: " + msg); };
  if (stages.empty()) fail("at least one conv stage is required");
  if (classes < 2) fail("classes must be >= 2");
  if (input_length == 0) fail("input_length must be positive");
  if (!std::isfinite(rho_init)) fail("rho_init must be finite");
  if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) fail("bn_momentum must be in (0, 1]");
  if (!(bn_eps > 0.0)) fail("bn_eps must be positive");
  if (!(variance_floor >= 0.0)) fail("variance_floor must be >= 0");
  std::size_t length = input_length;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const std::string where = "stage " + std::to_string(i + 1) + ": ";
    if (s.channels == 0) fail(where + "channels must be positive");
    if (s.kernel == 0 || s.kernel % 2 == 0) fail(where + "kernel must be odd");
    if (s.pool > 0) {
      if (s.pool > length) fail(where + "pool window exceeds the feature length");
      length = (length - s.pool) / s.pool + 1;
    }
  }
  if (!strict) return;
  if (stages.size() != 9) fail("exactly 9 conv stages are required, got " + std::to_string(stages.size()));
  for (std::size_t i = 0; i < 9; ++i) {
    const auto& s = stages[i];
    const std::string where = "stage " + std::to_string(i + 1) + ": ";
    if (i < 3 && s.pool == 0) fail(where + "stages 1-3 must max-pool");
    if (i < 3 && s.batchnorm) fail(where + "stages 1-3 must not use batchnorm");
    if (i >= 3 && s.pool != 0) fail(where + "stages 4-9 must not pool");
    if (i >= 3 && !s.batchnorm) fail(where + "stages 4-9 must use batchnorm");
  }
  if (classes != 2) fail("the classifier has exactly 2 classes");
  const std::size_t n = parameter_count();
  if (n < kMinStrictParams || n > kMaxStrictParams)
    fail("parameter count " + std::to_string(n) + " outside [162000, 198000]");
}

std::size_t NetworkConfig::parameter_count() const {
  std::size_t n = 0, cin = 1;
  for (const auto& s : stages) {
    n += cin * s.channels * s.kernel + s.channels;
    if (s.batchnorm) n += 2 * s.channels;
    cin = s.channels;
  }
  if (hidden > 0) {
    n += cin * hidden + hidden;
    cin = hidden;
  }
  return n + cin * classes + classes;
}

std::string NetworkConfig::to_text() const {
  std::ostringstream os;
  os << "stages=";
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (i) os << ',';
    os << stages[i].channels << ':' << stages[i].kernel << ':' << stages[i].pool << ':' << (stages[i].batchnorm ? 1 : 0);
  }
  os << "\ninput_length=" << input_length << "\nhidden=" << hidden << "\nclasses=" << classes
     << "\nvariational_bias=" << (variational_bias ? 1 : 0) << "\nrho_init=" << format_double(rho_init)
     << "\nbn_momentum=" << format_double(bn_momentum) << "\nbn_eps=" << format_double(bn_eps)
     << "\nvariance_floor=" << format_double(variance_floor) << "\nstrict=" << (strict ? 1 : 0) << '\n';
  return os.str();
}

void NetworkConfig::apply(const std::map<std::string, std::string>& kv) {
  for (const auto& [key, value] : kv) {
    if (key == "stages") {
      std::vector<ConvStage> parsed;
      for (const auto& item : split(value, ',')) {
        const auto parts = split(item, ':');
        if (parts.size() != 4) throw std::invalid_argument("network config: malformed stage '" + item + "'");
        parsed.push_back({parse_size(parts[0], "stage channels"), parse_size(parts[1], "stage kernel"),
                          parse_size(parts[2], "stage pool"), parse_bool(parts[3], "stage batchnorm")});
      }
      stages = std::move(parsed);
    } else if (key == "input_length") {
      input_length = parse_size(value, key);
    } else if (key == "hidden") {
      hidden = parse_size(value, key);
    } else if (key == "classes") {
      classes = parse_size(value, key);
    } else if (key == "variational_bias") {
      variational_bias = parse_bool(value, key);
    } else if (key == "rho_init") {
      rho_init = parse_double(value, key);
    } else if (key == "bn_momentum") {
      bn_momentum = parse_double(value, key);
    } else if (key == "bn_eps") {
      bn_eps = parse_double(value, key);
    } else if (key == "variance_floor") {
      variance_floor = parse_double(value, key);
    } else if (key == "strict") {
      strict = parse_bool(value, key);
    } else {
      throw std::invalid_argument("network config: unknown key '" + key + "'");
    }
  }
}

NetworkConfig NetworkConfig::from_text(std::string_view text) {
  NetworkConfig c;
  c.apply(parse_kv_text(text));
  return c;
}

template <class T>
BasicNetwork<T> BasicNetwork<T>::build(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  BasicNetwork net;
  net.config_ = config;
  net.seed_ = seed;
  auto add_layer = [&](const std::string& prefix, const Shape& shape, std::uint64_t layer_seed) {
    auto layer = BasicBayesLayer<T>::init(shape, config.variational_bias, config.rho_init, layer_seed);
    net.params_.push_back({prefix + ".w_mu", ParamKind::mu, std::move(layer.weight.mu)});
    net.params_.push_back({prefix + ".w_rho", ParamKind::rho, std::move(layer.weight.rho)});
    net.params_.push_back({prefix + ".b_mu", ParamKind::mu, std::move(layer.bias.mu)});
    if (config.variational_bias) net.params_.push_back({prefix + ".b_rho", ParamKind::rho, std::move(layer.bias.rho)});
  };
  std::size_t cin = 1;
  for (std::size_t i = 0; i < config.stages.size(); ++i) {
    const auto& s = config.stages[i];
    const std::string prefix = "conv" + std::to_string(i + 1);
    add_layer(prefix, Shape{s.channels, cin, s.kernel}, stream_seed(seed, 1, i));
    if (s.batchnorm) {
      const std::string bn = "bn" + std::to_string(i + 1);
      net.params_.push_back({bn + ".gamma", ParamKind::gamma, BasicTensor<T>(Shape{s.channels}, T{1})});
      net.params_.push_back({bn + ".beta", ParamKind::beta, BasicTensor<T>(Shape{s.channels}, T{0})});
      BatchNormState<T> st(s.channels);
      st.momentum = config.bn_momentum;
      st.eps = config.bn_eps;
      net.norm_states_.push_back(std::move(st));
    }
    cin = s.channels;
  }
  if (config.hidden > 0) {
    add_layer("fc1", Shape{config.hidden, cin}, stream_seed(seed, 2, 0));
    cin = config.hidden;
  }
  add_layer("fc_out", Shape{config.classes, cin}, stream_seed(seed, 2, 1));
  net.index_layers();
  return net;
}

template <class T>
void BasicNetwork<T>::index_layers() {
  std::map<std::string, std::size_t> by_name;
  for (std::size_t i = 0; i < params_.size(); ++i) by_name[params_[i].name] = i;
  auto find = [&](const std::string& name) {
    auto it = by_name.find(name);
    return it == by_name.end() ? kNoIndex : it->second;
  };
  auto layer = [&](const std::string& prefix) {
    LayerIndex li;
    li.w_mu = find(prefix + ".w_mu");
    li.w_rho = find(prefix + ".w_rho");
    li.b_mu = find(prefix + ".b_mu");
    li.b_rho = find(prefix + ".b_rho");
    return li;
  };
  conv_index_.clear();
  std::size_t norm = 0;
  for (std::size_t i = 0; i < config_.stages.size(); ++i) {
    LayerIndex li = layer("conv" + std::to_string(i + 1));
    if (config_.stages[i].batchnorm) {
      li.gamma = find("bn" + std::to_string(i + 1) + ".gamma");
      li.beta = find("bn" + std::to_string(i + 1) + ".beta");
      li.norm = norm++;
    }
    conv_index_.push_back(li);
  }
  hidden_index_ = config_.hidden > 0 ? layer("fc1") : LayerIndex{};
  out_index_ = layer("fc_out");
}

template <class T>
std::size_t BasicNetwork<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.kind != ParamKind::rho) n += p.value.size();
  return n;
}

template <class T>
std::vector<BasicVar<T>> BasicNetwork<T>::bind(BasicTape<T>& tape, bool trainable) const {
  std::vector<BasicVar<T>> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(trainable ? tape.leaf(p.value) : tape.constant(p.value));
  return out;
}

template <class T>
VariationalVars<T> BasicNetwork<T>::layer_vars(const LayerIndex& li, const std::vector<BasicVar<T>>& bound) const {
  VariationalVars<T> v{bound.at(li.w_mu), bound.at(li.w_rho), bound.at(li.b_mu), std::nullopt};
  if (li.b_rho != kNoIndex) v.b_rho = bound.at(li.b_rho);
  return v;
}

template <class T>
NetworkForward<T> BasicNetwork<T>::forward(const std::vector<BasicVar<T>>& bound, BasicVar<T> input,
                                           SamplingMode mode, const NoiseSource& noise, NormMode norm) {
  if (bound.size() != params_.size())
    throw std::invalid_argument("forward: bound parameter list does not match the network");
  const auto& in = input.value();
  if (in.rank() != 3 || in.dim(1) != 1 || in.dim(2) != config_.input_length)
    throw ShapeError("forward: expected input [B, 1, " + std::to_string(config_.input_length) + "], got " +
                     shape_str(in.shape()));
  auto& tape = *input.tape;
  std::optional<BasicVar<T>> kl;
  auto add_kl = [&](const std::optional<BasicVar<T>>& term) {
    if (!term) return;
    kl = kl ? ops::add(*kl, *term) : *term;
  };

  VariationalLayerOptions opt;
  opt.mode = mode;
  opt.variance_floor = config_.variance_floor;

  BasicVar<T> h = input;
  for (std::size_t i = 0; i < config_.stages.size(); ++i) {
    const auto& s = config_.stages[i];
    const auto& li = conv_index_[i];
    opt.stream = i;
    auto lo = bayes_conv1d_forward(layer_vars(li, bound), h, s.kernel / 2, noise, opt);
    add_kl(lo.kl);
    h = lo.out;
    if (s.batchnorm) h = ops::batchnorm1d(h, bound[li.gamma], bound[li.beta], norm_states_[li.norm], norm);
    h = ops::softplus(h);
    if (s.pool > 0) h = ops::maxpool1d(h, s.pool, s.pool);
  }
  h = ops::global_avg_pool(h);
  if (config_.hidden > 0) {
    opt.stream = config_.stages.size();
    auto lo = bayes_dense_forward(layer_vars(hidden_index_, bound), h, noise, opt);
    add_kl(lo.kl);
    h = ops::softplus(lo.out);
  }
  const BasicVar<T> features = h;
  opt.stream = config_.stages.size() + 1;
  auto lo = bayes_dense_forward(layer_vars(out_index_, bound), h, noise, opt);
  add_kl(lo.kl);
  if (!kl) kl = tape.constant(BasicTensor<T>::scalar(T{0}));
  return {lo.out, *kl, features};
}

template <class T>
BasicTensor<T> BasicNetwork<T>::logits(const BasicTensor<T>& input, SamplingMode mode, const NoiseSource& noise) {
  BasicTape<T> tape(false);
  const auto bound = bind(tape, false);
  const auto x = tape.constant(input);
  return forward(bound, x, mode, noise, NormMode::eval).logits.value();
}

template <class T>
BasicTensor<T> BasicNetwork<T>::penultimate_features(const BasicTensor<T>& input) {
  BasicTape<T> tape(false);
  const auto bound = bind(tape, false);
  const auto x = tape.constant(input);
  return forward(bound, x, SamplingMode::mean_only, NoiseSource::zeros(), NormMode::eval).features.value();
}

template <class T>
BasicNetwork<T> BasicNetwork<T>::from_parts(NetworkConfig config, std::uint64_t seed, std::vector<Param> params,
                                            std::vector<BatchNormState<T>> norm_states) {
  BasicNetwork net = build(config, seed);
  if (params.size() != net.params_.size())
    throw std::invalid_argument("network has " + std::to_string(net.params_.size()) + " parameter tensors, got " +
                                std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != net.params_[i].name)
      throw std::invalid_argument("parameter " + std::to_string(i) + ": expected '" + net.params_[i].name +
                                  "', got '" + params[i].name + "'");
    require_shape(params[i].value.shape(), net.params_[i].value.shape(), params[i].name);
    net.params_[i].value = std::move(params[i].value);
  }
  if (norm_states.size() != net.norm_states_.size())
    throw std::invalid_argument("batchnorm state count mismatch");
  for (std::size_t i = 0; i < norm_states.size(); ++i) {
    require_shape(norm_states[i].running_mean.shape(), net.norm_states_[i].running_mean.shape(), "running mean");
    require_shape(norm_states[i].running_var.shape(), net.norm_states_[i].running_var.shape(), "running var");
    net.norm_states_[i].running_mean = std::move(norm_states[i].running_mean);
    net.norm_states_[i].running_var = std::move(norm_states[i].running_var);
  }
  return net;
}

template class BasicNetwork<float>;
template class BasicNetwork<double>;

}  // namespace bayesbeat
