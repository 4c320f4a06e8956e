#include "mfdv/optim.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <vector>

#include "mfdv/errors.hpp"

namespace mfdv::nn {

void sgd_step(Model& model, const GradMap& grads, OptimState& opt) {
  const auto names = model.parameter_names();
  std::string missing, extra;
  for (const auto& n : names) {
    if (!grads.contains(n)) missing += (missing.empty() ? "" : ", ") + n;
  }
  for (const auto& [n, g] : grads) {
    if (std::find(names.begin(), names.end(), n) == names.end()) extra += (extra.empty() ? "" : ", ") + n;
  }
  if (!missing.empty() || !extra.empty()) {
    throw std::invalid_argument("sgd_step: gradient keys do not match parameters; missing {" + missing + "} extra {" +
                                extra + "}");
  }
  for (const auto& n : names) {
    const Tensor& g = grads.at(n);
    Tensor p = model.parameter(n);
    if (g.shape() != p.shape()) {
      throw ShapeError("sgd_step: gradient for '" + n + "' has shape " + to_string(g.shape()) + ", parameter " +
                       to_string(p.shape()));
    }
    auto [it, inserted] = opt.velocity.try_emplace(n, Tensor(p.shape()));
    Tensor& v = it->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = opt.momentum * v[i] - opt.lr * g[i];
      p[i] += v[i];
    }
    model.set_parameter(n, std::move(p));
  }
  model.enforce_invariants();
}

namespace {

constexpr char kMagic[5] = {'M', 'F', 'D', 'V', '1'};

template <class T>
void put_le(std::vector<unsigned char>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  template <class T>
  T get(const std::string& what) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    need(sizeof(U), what);
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(bytes_[pos_++]) << (8 * i);
    return std::bit_cast<T>(bits);
  }

  std::string string(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const std::string& what) const {
    if (bytes_.size() - pos_ < n) throw FormatError("load_weights: " + path_ + " truncated while reading " + what);
  }

  const std::vector<unsigned char>& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_weights(const Model& model, const std::filesystem::path& path) {
  std::vector<unsigned char> out(std::begin(kMagic), std::end(kMagic));
  auto record = [&](const std::string& name, const Tensor& t) {
    put_le(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_le(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_le(out, static_cast<std::uint64_t>(d));
    for (double v : t.data()) put_le(out, v);
  };
  for (const auto& name : model.parameter_names()) record(name, model.parameter(name));
  if (const auto* s = model.stochastic_state()) record("stochastic.delta", s->delta);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_weights: cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("save_weights: write failed for " + path.string());
}

void load_weights(Model& model, const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_weights: cannot open " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(bytes, path.string());
  if (r.string(sizeof kMagic, "magic") != std::string(kMagic, sizeof kMagic)) {
    throw FormatError("load_weights: " + path.string() + " is not an MFDV1 weight file");
  }

  std::map<std::string, Tensor> loaded;
  while (!r.done()) {
    const auto len = r.get<std::uint32_t>("name length");
    std::string name = r.string(len, "name");
    const auto rank = r.get<std::uint32_t>("rank of '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>("dims of '" + name + "'");
    if (numel(shape) > r.remaining() / sizeof(double)) {
      throw FormatError("load_weights: " + path.string() + " truncated while reading payload of '" + name + "'");
    }
    std::vector<double> data(numel(shape));
    for (double& v : data) v = r.get<double>("payload of '" + name + "'");
    loaded.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }

  // Validate everything before touching the model.
  std::vector<std::string> expected = model.parameter_names();
  const auto* state = model.stochastic_state();
  if (state) expected.emplace_back("stochastic.delta");
  for (const auto& name : expected) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw FormatError("load_weights: missing parameter '" + name + "'");
    const Shape& want = name == "stochastic.delta" ? state->delta.shape() : model.parameter(name).shape();
    if (it->second.shape() != want) {
      throw ShapeError("load_weights: parameter '" + name + "' has shape " + to_string(it->second.shape()) +
                       ", model expects " + to_string(want));
    }
  }
  if (loaded.size() != expected.size()) {
    for (const auto& [name, t] : loaded) {
      if (std::find(expected.begin(), expected.end(), name) == expected.end()) {
        throw FormatError("load_weights: unexpected parameter '" + name + "'");
      }
    }
  }
  for (const auto& name : model.parameter_names()) model.set_parameter(name, std::move(loaded.at(name)));
  if (auto* s = model.stochastic_state()) s->delta = std::move(loaded.at("stochastic.delta"));
}

}  // namespace mfdv::nn
