#include "mfdv/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

#include "mfdv/errors.hpp"
#include "mfdv/inference.hpp"

namespace mfdv::attacks {
namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

constexpr double kNormSlack = 1e-12;

// Views an example as [C,H,W]: rank 1 -> [1,1,D], rank 2 -> [1,H,W].
struct ImageView {
  std::size_t c, h, w;
};

ImageView image_view(const Shape& s) {
  switch (s.size()) {
    case 1: return {1, 1, s[0]};
    case 2: return {1, s[0], s[1]};
    case 3: return {s[0], s[1], s[2]};
    default: throw ShapeError("attack: unsupported input shape " + to_string(s));
  }
}

Tensor sign_step(const Tensor& x, const Tensor& grad, double step) {
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = static_cast<double>((grad[i] > 0.0) - (grad[i] < 0.0));
    out[i] = x[i] + step * s;
  }
  return out;
}

Tensor clamp01(Tensor t) {
  for (double& v : t.data()) v = std::clamp(v, 0.0, 1.0);
  return t;
}

void notify(const AttackContext& ctx, const Tensor& candidate) {
  if (ctx.on_query) ctx.on_query(candidate);
}

std::size_t mc_cost(const nn::Model& model, const AttackContext& ctx) {
  return model.is_stochastic() ? ctx.mc_samples : 1;
}

AttackResult finish(const nn::Model& model, const Tensor& x, int label, Tensor x_adv, std::size_t queries,
                    const AttackContext& ctx) {
  AttackResult r;
  r.success = fooled(model, x_adv, label, ctx);
  r.queries = queries + mc_cost(model, ctx);
  r.distortion = distortion(x, x_adv);
  r.x_adv = std::move(x_adv);
  return r;
}

using GradFn = std::function<Tensor(const Tensor&, Rng&)>;

GradFn ce_gradient(const nn::Model& model, int label, std::size_t samples) {
  return [&model, label, samples](const Tensor& v, Rng& rng) {
    return nn::input_gradient(model, v, label, nn::LossKind::CrossEntropy, rng, samples);
  };
}

Tensor pgd_iterate(const Tensor& x, Tensor start, const Pgd& cfg, const GradFn& grad, Rng& rng,
                   const AttackContext& ctx, std::size_t& queries) {
  Tensor cur = std::move(start);
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    notify(ctx, cur);
    const Tensor g = grad(cur, rng);
    ++queries;
    cur = project_linf(sign_step(cur, g, cfg.alpha), x, cfg.epsilon);
  }
  return cur;
}

Tensor pgd_start(const Tensor& x, const Pgd& cfg, Rng& rng) {
  if (!cfg.random_start) return x;
  std::uniform_real_distribution<double> u(-cfg.epsilon, cfg.epsilon);
  Tensor start = x;
  for (double& v : start.data()) v += u(rng);
  return project_linf(start, x, cfg.epsilon);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_number(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const auto slash = text.find('/');
    if (slash != std::string::npos) {
      const double num = std::stod(text.substr(0, slash), &used);
      if (used != slash) throw std::invalid_argument(text);
      const std::string den_text = text.substr(slash + 1);
      const double den = std::stod(den_text, &used);
      if (used != den_text.size() || den == 0.0) throw std::invalid_argument(text);
      return num / den;
    }
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("attack." + key, "not a number: '" + text + "'");
  }
}

std::size_t parse_count(const std::string& key, const std::string& text) {
  const double v = parse_number(key, text);
  if (v < 0 || v != std::floor(v)) throw ConfigError("attack." + key, "not a non-negative integer: '" + text + "'");
  return static_cast<std::size_t>(v);
}

}  // namespace

void validate(const AttackConfig& config) {
  auto eps = [](double e) {
    if (!(e >= 0.0) || !std::isfinite(e)) throw ConfigError("attack.eps", "must be finite and >= 0");
  };
  auto positive = [](const char* field, std::size_t n) {
    if (n == 0) throw ConfigError(std::string("attack.") + field, "must be >= 1");
  };
  auto pgd_checks = [&](const Pgd& p) {
    eps(p.epsilon);
    positive("k", p.steps);
    if (!(p.alpha > 0.0)) throw ConfigError("attack.alpha", "must be > 0");
  };
  std::visit(Overloaded{
                 [](const NullAttack&) {},
                 [&](const Fgsm& f) { eps(f.epsilon); },
                 [&](const Pgd& p) { pgd_checks(p); },
                 [&](const CwL2& c) {
                   positive("iters", c.iterations);
                   positive("steps", c.binary_steps);
                   if (!(c.lr > 0.0)) throw ConfigError("attack.lr", "must be > 0");
                   if (!(c.c_init > 0.0)) throw ConfigError("attack.c", "must be > 0");
                   if (!(c.confidence >= 0.0)) throw ConfigError("attack.confidence", "must be >= 0");
                 },
                 [&](const NPixel& n) {
                   positive("n", n.pixels);
                   positive("gens", n.generations);
                   if (n.population < 4) throw ConfigError("attack.pop", "differential evolution needs >= 4 members");
                 },
                 [&](const Square& s) {
                   eps(s.epsilon);
                   positive("budget", s.query_budget);
                 },
                 [&](const Eot& e) {
                   positive("samples", e.samples);
                   std::visit(Overloaded{[&](const Fgsm& f) { eps(f.epsilon); }, [&](const Pgd& p) { pgd_checks(p); }},
                              e.inner);
                 },
                 [&](const RandomNoise& r) {
                   eps(r.epsilon);
                   positive("samples", r.samples);
                 },
             },
             config);
}

std::string kind(const AttackConfig& config) {
  return std::visit(Overloaded{
                        [](const NullAttack&) -> std::string { return "none"; },
                        [](const Fgsm&) -> std::string { return "fgsm"; },
                        [](const Pgd&) -> std::string { return "pgd"; },
                        [](const CwL2&) -> std::string { return "cw"; },
                        [](const NPixel&) -> std::string { return "npixel"; },
                        [](const Square&) -> std::string { return "square"; },
                        [](const Eot& e) -> std::string {
                          return std::holds_alternative<Fgsm>(e.inner) ? "eot-fgsm" : "eot-pgd";
                        },
                        [](const RandomNoise&) -> std::string { return "noise"; },
                    },
                    config);
}

double epsilon_of(const AttackConfig& config) {
  return std::visit(Overloaded{
                        [](const Fgsm& f) { return f.epsilon; },
                        [](const Pgd& p) { return p.epsilon; },
                        [](const Square& s) { return s.epsilon; },
                        [](const RandomNoise& r) { return r.epsilon; },
                        [](const Eot& e) { return std::visit([](const auto& in) { return in.epsilon; }, e.inner); },
                        [](const auto&) { return 0.0; },
                    },
                    config);
}

std::string describe(const AttackConfig& config) {
  std::map<std::string, std::string> kv;
  auto put_pgd = [&](const Pgd& p) {
    kv["alpha"] = fmt(p.alpha);
    kv["eps"] = fmt(p.epsilon);
    kv["k"] = std::to_string(p.steps);
    kv["random_start"] = p.random_start ? "1" : "0";
  };
  std::visit(Overloaded{
                 [](const NullAttack&) {},
                 [&](const Fgsm& f) { kv["eps"] = fmt(f.epsilon); },
                 [&](const Pgd& p) { put_pgd(p); },
                 [&](const CwL2& c) {
                   kv["c"] = fmt(c.c_init);
                   kv["confidence"] = fmt(c.confidence);
                   kv["iters"] = std::to_string(c.iterations);
                   kv["lr"] = fmt(c.lr);
                   kv["steps"] = std::to_string(c.binary_steps);
                 },
                 [&](const NPixel& n) {
                   kv["gens"] = std::to_string(n.generations);
                   kv["n"] = std::to_string(n.pixels);
                   kv["pop"] = std::to_string(n.population);
                 },
                 [&](const Square& s) {
                   kv["budget"] = std::to_string(s.query_budget);
                   kv["eps"] = fmt(s.epsilon);
                 },
                 [&](const Eot& e) {
                   kv["samples"] = std::to_string(e.samples);
                   std::visit(Overloaded{[&](const Fgsm& f) { kv["eps"] = fmt(f.epsilon); }, [&](const Pgd& p) { put_pgd(p); }},
                              e.inner);
                 },
                 [&](const RandomNoise& r) {
                   kv["eps"] = fmt(r.epsilon);
                   kv["samples"] = std::to_string(r.samples);
                 },
             },
             config);
  std::string out = kind(config);
  char sep = ':';
  for (const auto& [k, v] : kv) {
    out += sep + k + "=" + v;
    sep = ',';
  }
  return out;
}

AttackConfig parse_attack(const std::string& text) {
  const auto colon = text.find(':');
  const std::string name = text.substr(0, colon);
  std::map<std::string, std::string> kv;
  if (colon != std::string::npos) {
    std::stringstream ss(text.substr(colon + 1));
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ConfigError("attack", "expected key=value, got '" + item + "'");
      kv[item.substr(0, eq)] = item.substr(eq + 1);
    }
  }
  std::map<std::string, std::string> unused = kv;
  auto num = [&](const std::string& key, double fallback) {
    unused.erase(key);
    auto it = kv.find(key);
    return it == kv.end() ? fallback : parse_number(key, it->second);
  };
  auto count = [&](const std::string& key, std::size_t fallback) {
    unused.erase(key);
    auto it = kv.find(key);
    return it == kv.end() ? fallback : parse_count(key, it->second);
  };
  auto read_pgd = [&]() {
    Pgd p;
    p.epsilon = num("eps", p.epsilon);
    p.alpha = num("alpha", p.epsilon / 10.0);
    p.steps = count("k", p.steps);
    p.random_start = count("random_start", 0) != 0;
    return p;
  };

  AttackConfig config;
  if (name == "none") {
    config = NullAttack{};
  } else if (name == "fgsm") {
    config = Fgsm{num("eps", Fgsm{}.epsilon)};
  } else if (name == "pgd") {
    config = read_pgd();
  } else if (name == "cw") {
    CwL2 c;
    c.c_init = num("c", c.c_init);
    c.confidence = num("confidence", c.confidence);
    c.iterations = count("iters", c.iterations);
    c.lr = num("lr", c.lr);
    c.binary_steps = count("steps", c.binary_steps);
    config = c;
  } else if (name == "npixel") {
    NPixel n;
    n.generations = count("gens", n.generations);
    n.pixels = count("n", n.pixels);
    n.population = count("pop", n.population);
    config = n;
  } else if (name == "square") {
    Square s;
    s.query_budget = count("budget", s.query_budget);
    s.epsilon = num("eps", s.epsilon);
    config = s;
  } else if (name == "eot-fgsm" || name == "eot-pgd") {
    Eot e;
    e.samples = count("samples", e.samples);
    if (name == "eot-fgsm") {
      e.inner = Fgsm{num("eps", Fgsm{}.epsilon)};
    } else {
      e.inner = read_pgd();
    }
    config = e;
  } else if (name == "noise") {
    RandomNoise r;
    r.epsilon = num("eps", r.epsilon);
    r.samples = count("samples", r.samples);
    config = r;
  } else {
    throw ConfigError("attack", "unknown attack '" + name + "'");
  }
  if (!unused.empty()) throw ConfigError("attack." + unused.begin()->first, "unknown key for " + name);
  validate(config);
  return config;
}

Distortion distortion(const Tensor& x, const Tensor& x_adv) {
  if (x.shape() != x_adv.shape()) throw ShapeError("distortion: shape mismatch");
  Distortion d;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double diff = x_adv[i] - x[i];
    if (diff != 0.0) d.l0 += 1.0;
    d.l2 += diff * diff;
    d.linf = std::max(d.linf, std::abs(diff));
  }
  d.l2 = std::sqrt(d.l2);
  return d;
}

std::size_t changed_pixels(const Tensor& x, const Tensor& x_adv) {
  const ImageView v = image_view(x.shape());
  const std::size_t plane = v.h * v.w;
  std::size_t count = 0;
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < v.c; ++c) {
      if (x[c * plane + p] != x_adv[c * plane + p]) {
        ++count;
        break;
      }
    }
  }
  return count;
}

bool fooled(const nn::Model& model, const Tensor& x, int label, const AttackContext& context) {
  Rng rng(context.mc_seed);
  return eval::mc_label(model, x, context.mc_samples, rng) != label;
}

Tensor project_linf(const Tensor& v, const Tensor& x, double epsilon) {
  Tensor out = v;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::clamp(std::clamp(v[i], x[i] - epsilon, x[i] + epsilon), 0.0, 1.0);
  }
  return out;
}

AttackResult fgsm(const nn::Model& model, const Tensor& x, int label, const Fgsm& config, Rng& rng,
                  const AttackContext& context) {
  notify(context, x);
  const Tensor g = nn::input_gradient(model, x, label, nn::LossKind::CrossEntropy, rng);
  return finish(model, x, label, clamp01(sign_step(x, g, config.epsilon)), 1, context);
}

AttackResult pgd(const nn::Model& model, const Tensor& x, int label, const Pgd& config, Rng& rng,
                 const AttackContext& context) {
  std::size_t queries = 0;
  Tensor adv = pgd_iterate(x, pgd_start(x, config, rng), config, ce_gradient(model, label, 1), rng, context, queries);
  return finish(model, x, label, std::move(adv), queries, context);
}

Tensor eot_gradient(const nn::Model& model, const Tensor& x, int label, std::size_t samples, Rng& rng) {
  if (samples == 0) throw std::invalid_argument("eot_gradient: samples must be >= 1");
  // The trunk is deterministic, so one forward with `samples` noise rows and the
  // mean loss gives the mean of the per-draw gradients.
  return nn::input_gradient(model, x, label, nn::LossKind::CrossEntropy, rng, model.is_stochastic() ? samples : 1);
}

AttackResult eot_attack(const nn::Model& model, const Tensor& x, int label, const Eot& config, Rng& rng,
                        const AttackContext& context) {
  const GradFn grad = [&](const Tensor& v, Rng& r) { return eot_gradient(model, v, label, config.samples, r); };
  std::size_t queries = 0;
  Tensor adv = std::visit(Overloaded{
                              [&](const Fgsm& f) {
                                notify(context, x);
                                queries = config.samples;
                                return clamp01(sign_step(x, grad(x, rng), f.epsilon));
                              },
                              [&](const Pgd& p) {
                                Tensor out = pgd_iterate(x, pgd_start(x, p, rng), p, grad, rng, context, queries);
                                queries *= config.samples;
                                return out;
                              },
                          },
                          config.inner);
  return finish(model, x, label, std::move(adv), queries, context);
}

std::vector<Tensor> pgd_sweep(const nn::Model& model, const Tensor& x, int label, const std::vector<double>& epsilons,
                              const Pgd& base, Rng& rng) {
  if (!std::is_sorted(epsilons.begin(), epsilons.end())) throw std::invalid_argument("pgd_sweep: budgets must ascend");
  std::vector<Tensor> out;
  Tensor warm = x;
  const GradFn grad = ce_gradient(model, label, 1);
  for (double eps : epsilons) {
    Pgd cfg = base;
    cfg.epsilon = eps;
    cfg.alpha = base.alpha * (base.epsilon > 0.0 ? eps / base.epsilon : 1.0);
    Tensor cur = project_linf(warm, x, eps);
    Tensor best = cur;
    double best_loss = nn::loss_value(model, cur, label, nn::LossKind::CrossEntropy, rng);
    for (std::size_t k = 0; k < cfg.steps; ++k) {
      cur = project_linf(sign_step(cur, grad(cur, rng), cfg.alpha), x, eps);
      const double l = nn::loss_value(model, cur, label, nn::LossKind::CrossEntropy, rng);
      if (l > best_loss) {
        best_loss = l;
        best = cur;
      }
    }
    out.push_back(best);
    warm = std::move(best);
  }
  return out;
}

AttackResult cw_l2(const nn::Model& model, const Tensor& x, int label, const CwL2& config, Rng& rng,
                   const AttackContext& context) {
  const std::size_t n = x.size();
  std::size_t queries = 0;

  struct Eval {
    double margin;  // z_y - max_{j != y} z_j
    Tensor grad;    // d clamp(margin, -kappa) / d input
  };
  auto evaluate = [&](const Tensor& v) {
    notify(context, v);
    ++queries;
    Graph graph;
    const nn::ForwardTrace t = model.trace(graph, v, rng, {.input_grad = true});
    const NodeId raw = graph.logit_margin(t.logits, label, std::numeric_limits<double>::infinity());
    const NodeId clamped = graph.logit_margin(t.logits, label, config.confidence);
    return Eval{graph.value(raw).item(), graph.backward(clamped)[t.input]};
  };
  auto succeeded = [&](double margin) { return margin < -config.confidence; };

  if (succeeded(evaluate(x).margin)) return finish(model, x, label, x, queries, context);

  std::vector<double> w0(n);
  for (std::size_t i = 0; i < n; ++i) w0[i] = std::atanh((2.0 * x[i] - 1.0) * 0.999999);

  double lo = 0.0, hi = std::numeric_limits<double>::infinity(), c = config.c_init;
  double best_l2 = std::numeric_limits<double>::infinity();
  double best_fail_margin = std::numeric_limits<double>::infinity();
  Tensor best_success, best_failure = x;

  for (std::size_t step = 0; step < config.binary_steps; ++step) {
    std::vector<double> w = w0, m(n, 0.0), v(n, 0.0);
    bool any_success = false;
    double b1t = 1.0, b2t = 1.0;
    for (std::size_t it = 0; it < config.iterations; ++it) {
      Tensor cand(x.shape());
      for (std::size_t i = 0; i < n; ++i) cand[i] = 0.5 * (std::tanh(w[i]) + 1.0);
      const Eval e = evaluate(cand);
      double l2sq = 0.0;
      for (std::size_t i = 0; i < n; ++i) l2sq += (cand[i] - x[i]) * (cand[i] - x[i]);
      if (succeeded(e.margin)) {
        any_success = true;
        if (l2sq < best_l2) {
          best_l2 = l2sq;
          best_success = cand;
        }
      } else if (best_success.size() <= 1 && e.margin < best_fail_margin) {
        best_fail_margin = e.margin;
        best_failure = cand;
      }
      // Adam on w for |cand - x|^2 + c * max(margin, -kappa).
      b1t *= 0.9;
      b2t *= 0.999;
      for (std::size_t i = 0; i < n; ++i) {
        const double dx = 2.0 * (cand[i] - x[i]) + c * e.grad[i];
        const double t = std::tanh(w[i]);
        const double g = dx * 0.5 * (1.0 - t * t);
        m[i] = 0.9 * m[i] + 0.1 * g;
        v[i] = 0.999 * v[i] + 0.001 * g * g;
        w[i] -= config.lr * (m[i] / (1.0 - b1t)) / (std::sqrt(v[i] / (1.0 - b2t)) + 1e-8);
      }
    }
    if (any_success) {
      hi = std::min(hi, c);
      c = 0.5 * (lo + hi);
    } else {
      lo = std::max(lo, c);
      c = std::isfinite(hi) ? 0.5 * (lo + hi) : 2.0 * c;
    }
  }
  return finish(model, x, label, best_success.size() > 1 || std::isfinite(best_l2) ? best_success : best_failure,
                queries, context);
}

AttackResult n_pixel(const nn::Model& model, const Tensor& x, int label, const NPixel& config, Rng& rng,
                     const AttackContext& context) {
  const ImageView view = image_view(x.shape());
  const std::size_t plane = view.h * view.w;
  const std::size_t per_pixel = 2 + view.c;
  const std::size_t dims = config.pixels * per_pixel;
  const std::size_t pop = config.population;
  constexpr double kF = 0.5, kCR = 0.7;
  std::size_t queries = 0;

  auto row_of = [&](double v) { return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(view.h) - 1e-9)); };
  auto col_of = [&](double v) { return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(view.w) - 1e-9)); };
  auto apply = [&](const std::vector<double>& cand) {
    Tensor out = x;
    for (std::size_t p = 0; p < config.pixels; ++p) {
      const double* g = cand.data() + p * per_pixel;
      const std::size_t loc = row_of(g[0]) * view.w + col_of(g[1]);
      for (std::size_t c = 0; c < view.c; ++c) out[c * plane + loc] = std::clamp(g[2 + c], 0.0, 1.0);
    }
    return out;
  };
  auto clip = [&](std::vector<double>& cand) {
    for (std::size_t p = 0; p < config.pixels; ++p) {
      double* g = cand.data() + p * per_pixel;
      g[0] = std::clamp(g[0], 0.0, static_cast<double>(view.h) - 1e-9);
      g[1] = std::clamp(g[1], 0.0, static_cast<double>(view.w) - 1e-9);
      for (std::size_t c = 0; c < view.c; ++c) g[2 + c] = std::clamp(g[2 + c], 0.0, 1.0);
    }
  };
  // Fitness: true-class probability at one noise draw, evaluated as one batch.
  auto fitness = [&](const std::vector<std::vector<double>>& cands) {
    Shape batch_shape = x.shape();
    batch_shape.insert(batch_shape.begin(), cands.size());
    Tensor batch(batch_shape);
    for (std::size_t i = 0; i < cands.size(); ++i) {
      const Tensor img = apply(cands[i]);
      notify(context, img);
      std::copy(img.data().begin(), img.data().end(), batch.data().begin() + static_cast<std::ptrdiff_t>(i * x.size()));
    }
    queries += cands.size();
    const Tensor probs = softmax(model.forward(batch, nn::Mode::Eval, rng));
    std::vector<double> f(cands.size());
    for (std::size_t i = 0; i < cands.size(); ++i) f[i] = probs[i * model.num_classes() + static_cast<std::size_t>(label)];
    return f;
  };

  std::uniform_real_distribution<double> urow(0.0, static_cast<double>(view.h));
  std::uniform_real_distribution<double> ucol(0.0, static_cast<double>(view.w));
  std::normal_distribution<double> color(0.5, 0.25);
  std::vector<std::vector<double>> population(pop, std::vector<double>(dims));
  for (auto& cand : population) {
    for (std::size_t p = 0; p < config.pixels; ++p) {
      double* g = cand.data() + p * per_pixel;
      g[0] = urow(rng);
      g[1] = ucol(rng);
      for (std::size_t c = 0; c < view.c; ++c) g[2 + c] = color(rng);
    }
    clip(cand);
  }
  std::vector<double> score = fitness(population);
  auto best_index = [&] { return static_cast<std::size_t>(std::min_element(score.begin(), score.end()) - score.begin()); };

  auto early_stop = [&] {
    queries += mc_cost(model, context);
    return fooled(model, apply(population[best_index()]), label, context);
  };
  if (!early_stop()) {
    std::uniform_int_distribution<std::size_t> pick(0, pop - 1);
    std::uniform_int_distribution<std::size_t> pick_dim(0, dims - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t gen = 0; gen < config.generations; ++gen) {
      std::vector<std::vector<double>> trials(pop);
      for (std::size_t i = 0; i < pop; ++i) {
        std::size_t a, b, c;
        do a = pick(rng); while (a == i);
        do b = pick(rng); while (b == i || b == a);
        do c = pick(rng); while (c == i || c == a || c == b);
        const std::size_t forced = pick_dim(rng);
        trials[i] = population[i];
        for (std::size_t d = 0; d < dims; ++d) {
          if (d == forced || unit(rng) < kCR) trials[i][d] = population[a][d] + kF * (population[b][d] - population[c][d]);
        }
        clip(trials[i]);
      }
      const std::vector<double> trial_score = fitness(trials);
      for (std::size_t i = 0; i < pop; ++i) {
        if (trial_score[i] <= score[i]) {
          population[i] = std::move(trials[i]);
          score[i] = trial_score[i];
        }
      }
      if (early_stop()) break;
    }
  }
  Tensor adv = apply(population[best_index()]);
  AttackResult r = finish(model, x, label, std::move(adv), queries, context);
  r.queries -= mc_cost(model, context);  // the final check repeats the last early-stop check
  return r;
}

AttackResult square_attack(const nn::Model& model, const Tensor& x, int label, const Square& config, Rng& rng,
                           const AttackContext& context) {
  if (config.epsilon == 0.0) return finish(model, x, label, x, 0, context);
  const ImageView view = image_view(x.shape());
  const std::size_t plane = view.h * view.w;
  const double eps = config.epsilon;
  std::size_t queries = 0;

  auto margin = [&](const Tensor& v) {
    notify(context, v);
    ++queries;
    const Tensor z = model.forward(v, nn::Mode::Eval, rng);
    double other = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < z.size(); ++j) {
      if (j != static_cast<std::size_t>(label)) other = std::max(other, z[j]);
    }
    return z[static_cast<std::size_t>(label)] - other;
  };

  std::bernoulli_distribution coin(0.5);
  // Vertical stripes: one random sign per (channel, column).
  Tensor best = x;
  for (std::size_t c = 0; c < view.c; ++c) {
    for (std::size_t j = 0; j < view.w; ++j) {
      const double s = coin(rng) ? eps : -eps;
      for (std::size_t i = 0; i < view.h; ++i) {
        const std::size_t k = c * plane + i * view.w + j;
        best[k] = std::clamp(x[k] + s, 0.0, 1.0);
      }
    }
  }
  AttackResult result;
  double best_loss = margin(best);
  result.loss_trace.push_back(best_loss);

  const std::size_t side0 = static_cast<std::size_t>(std::ceil(0.3 * static_cast<double>(std::max(view.h, view.w))));
  const std::size_t mc = mc_cost(model, context);
  bool success = false;
  if (best_loss < 0.0 && queries + mc <= config.query_budget) {
    queries += mc;
    success = fooled(model, best, label, context);
  }
  while (!success && queries < config.query_budget) {
    // Side halves at 10%, 30%, 50%, 70% and 90% of the budget.
    const double progress = static_cast<double>(queries) / static_cast<double>(config.query_budget);
    std::size_t side = side0;
    for (double mark : {0.1, 0.3, 0.5, 0.7, 0.9}) {
      if (progress >= mark) side = std::max<std::size_t>(1, side / 2);
    }
    const std::size_t sh = std::min(side, view.h), sw = std::min(side, view.w);
    std::uniform_int_distribution<std::size_t> r0(0, view.h - sh), c0(0, view.w - sw);
    const std::size_t top = r0(rng), left = c0(rng);
    Tensor cand = best;
    for (std::size_t c = 0; c < view.c; ++c) {
      const double s = coin(rng) ? eps : -eps;
      for (std::size_t i = top; i < top + sh; ++i) {
        for (std::size_t j = left; j < left + sw; ++j) {
          const std::size_t k = c * plane + i * view.w + j;
          cand[k] = std::clamp(x[k] + s, 0.0, 1.0);
        }
      }
    }
    const double loss = margin(cand);
    if (loss < best_loss) {
      best_loss = loss;
      best = std::move(cand);
      result.loss_trace.push_back(best_loss);
      if (best_loss < 0.0 && queries + mc <= config.query_budget) {
        queries += mc;
        success = fooled(model, best, label, context);
      }
    }
  }
  result.x_adv = best;
  result.success = success || fooled(model, best, label, context);
  result.queries = queries;
  result.distortion = distortion(x, best);
  return result;
}

AttackResult random_noise(const nn::Model& model, const Tensor& x, int label, const RandomNoise& config, Rng& rng,
                          const AttackContext& context) {
  std::bernoulli_distribution coin(0.5);
  std::size_t queries = 0;
  Tensor last = x;
  for (std::size_t s = 0; s < config.samples; ++s) {
    Tensor cand = x;
    for (std::size_t i = 0; i < cand.size(); ++i) cand[i] = std::clamp(x[i] + (coin(rng) ? 1.0 : -1.0) * config.epsilon, 0.0, 1.0);
    notify(context, cand);
    queries += mc_cost(model, context);
    if (fooled(model, cand, label, context)) return finish(model, x, label, std::move(cand), queries - mc_cost(model, context), context);
    last = std::move(cand);
  }
  AttackResult r = finish(model, x, label, std::move(last), queries, context);
  r.queries -= mc_cost(model, context);
  return r;
}

void check_invariants(const Tensor& x, const AttackResult& result, const AttackConfig& config) {
  for (double v : result.x_adv.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::logic_error(kind(config) + ": x_adv leaves the [0,1] box");
  }
  const Distortion d = distortion(x, result.x_adv);
  const double eps = epsilon_of(config);
  const bool linf_bounded = std::holds_alternative<Fgsm>(config) || std::holds_alternative<Pgd>(config) ||
                            std::holds_alternative<Square>(config) || std::holds_alternative<Eot>(config) ||
                            std::holds_alternative<RandomNoise>(config);
  if (linf_bounded && d.linf > eps + kNormSlack) {
    throw std::logic_error(kind(config) + ": L-inf distortion " + fmt(d.linf) + " exceeds eps " + fmt(eps));
  }
  if (const auto* np = std::get_if<NPixel>(&config); np && changed_pixels(x, result.x_adv) > np->pixels) {
    throw std::logic_error("npixel: more than " + std::to_string(np->pixels) + " pixels changed");
  }
  if (std::holds_alternative<NullAttack>(config) && d.l0 != 0.0) throw std::logic_error("none: input was modified");
}

AttackResult run_attack(const nn::Model& model, const Tensor& x, int label, const AttackConfig& config, Rng& rng,
                        const AttackContext& context) {
  AttackResult r = std::visit(Overloaded{
                                  [&](const NullAttack&) { return finish(model, x, label, x, 0, context); },
                                  [&](const Fgsm& c) { return fgsm(model, x, label, c, rng, context); },
                                  [&](const Pgd& c) { return pgd(model, x, label, c, rng, context); },
                                  [&](const CwL2& c) { return cw_l2(model, x, label, c, rng, context); },
                                  [&](const NPixel& c) { return n_pixel(model, x, label, c, rng, context); },
                                  [&](const Square& c) { return square_attack(model, x, label, c, rng, context); },
                                  [&](const Eot& c) { return eot_attack(model, x, label, c, rng, context); },
                                  [&](const RandomNoise& c) { return random_noise(model, x, label, c, rng, context); },
                              },
                              config);
  check_invariants(x, r, config);
  return r;
}

}  // namespace mfdv::attacks
