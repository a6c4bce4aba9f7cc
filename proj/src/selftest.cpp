#include "rulmae/selftest.hpp"

#include <cmath>
#include <ostream>
#include <sstream>

#include "rulmae/adam.hpp"
#include "rulmae/grad_check.hpp"
#include "rulmae/model.hpp"
#include "rulmae/rng.hpp"
#include "rulmae/tape.hpp"
#include "rulmae/windowing.hpp"

namespace rulmae {
namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, scale);
  return t;
}

CheckResult from_report(const std::string& name, const GradCheckReport& report,
                        double tol) {
  CheckResult r;
  r.name = name;
  r.ok = report.pass(tol);
  std::ostringstream os;
  os << report.summary() << ", tol " << tol;
  r.detail = os.str();
  return r;
}

// Builds a tape over `inputs`, applies `apply`, contracts the output with
// fixed weights and returns loss (+ gradients on demand).
GradCheckReport check_op(
    const std::function<VarId(Tape&, const std::vector<VarId>&)>& apply,
    std::vector<Tensor> inputs, std::uint64_t weight_seed, double h = 1e-5) {
  LossAndGrad fn = [&apply, weight_seed](const std::vector<Tensor>& ins,
                                         std::vector<Tensor>* grads) {
    Tape tape;
    std::vector<VarId> ids;
    ids.reserve(ins.size());
    for (const Tensor& t : ins) ids.push_back(tape.leaf(t, true));
    VarId y = apply(tape, ids);
    Rng wrng(weight_seed);
    Tensor w(tape.value(y).shape());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = wrng.normal();
    VarId loss = tape.value(y).size() == 1 ? y : tape.weighted_sum(y, w);
    const double value = tape.value(loss).scalar_value();
    if (grads) {
      tape.backward(loss);
      grads->clear();
      for (VarId id : ids) grads->push_back(tape.grad(id));
    }
    return value;
  };
  return grad_check(fn, std::move(inputs), h);
}

}  // namespace

std::vector<CheckResult> gradient_checks() {
  std::vector<CheckResult> results;
  Rng rng(20240811);

  {
    std::vector<Tensor> inputs;
    inputs.push_back(random_tensor({4, 3}, rng));
    inputs.push_back(random_tensor({3, 2}, rng));
    inputs.push_back(random_tensor({2}, rng));
    auto report = check_op(
        [](Tape& t, const std::vector<VarId>& v) { return t.linear(v[0], v[1], v[2]); },
        std::move(inputs), 11);
    results.push_back(from_report("gradcheck linear 4x3*3x2", report, 1e-6));
  }
  {
    std::vector<Tensor> inputs;
    inputs.push_back(random_tensor({5, 2}, rng));
    inputs.push_back(random_tensor({3, 2, 3}, rng));
    inputs.push_back(random_tensor({3}, rng));
    auto report = check_op(
        [](Tape& t, const std::vector<VarId>& v) { return t.conv1d(v[0], v[1], v[2], 1); },
        std::move(inputs), 12);
    results.push_back(from_report("gradcheck conv1d [5,2]->[5,3] k=3 pad=1", report, 1e-6));
  }
  {
    std::vector<Tensor> inputs;
    inputs.push_back(random_tensor({3, 4}, rng));
    inputs.push_back(random_tensor({3, 4}, rng));
    auto report = check_op(
        [](Tape& t, const std::vector<VarId>& v) { return t.glu(v[0], v[1]); },
        std::move(inputs), 13);
    results.push_back(from_report("gradcheck glu", report, 1e-6));
  }
  {
    std::vector<Tensor> inputs;
    inputs.push_back(random_tensor({3, 5}, rng));
    auto report = check_op(
        [](Tape& t, const std::vector<VarId>& v) { return t.softmax(v[0]); },
        std::move(inputs), 14);
    results.push_back(from_report("gradcheck softmax", report, 1e-6));
  }
  {
    std::vector<Tensor> inputs;
    inputs.push_back(random_tensor({4, 6}, rng));
    inputs.push_back(random_tensor({6}, rng));
    inputs.push_back(random_tensor({6}, rng));
    auto report = check_op(
        [](Tape& t, const std::vector<VarId>& v) {
          return t.layer_norm(v[0], v[1], v[2]);
        },
        std::move(inputs), 15);
    results.push_back(from_report("gradcheck layer_norm", report, 1e-6));
  }
  {
    std::vector<Tensor> inputs;
    inputs.push_back(random_tensor({5, 4}, rng));
    auto report = check_op(
        [](Tape& t, const std::vector<VarId>& v) {
          Rng drop_rng(991);  // identical mask on every probe
          return t.dropout(v[0], 0.3, true, drop_rng);
        },
        std::move(inputs), 16);
    results.push_back(from_report("gradcheck dropout rate=0.3", report, 1e-6));
  }
  {
    // 3 tokens, d=8, H=2: query/key/value plus all projections.
    std::vector<Tensor> inputs;
    inputs.push_back(random_tensor({3, 8}, rng, 0.5));        // x
    for (int i = 0; i < 4; ++i) {
      inputs.push_back(random_tensor({8, 8}, rng, 0.35));     // wq wk wv wo
      inputs.push_back(random_tensor({8}, rng, 0.1));         // biases
    }
    auto report = check_op(
        [](Tape& t, const std::vector<VarId>& v) {
          return multi_head_attention(t, v[0], v[0], v[0], v[1], v[2], v[3], v[4], v[5],
                                      v[6], v[7], v[8], 2);
        },
        std::move(inputs), 17);
    results.push_back(from_report("gradcheck attention [3,d=8,H=2]", report, 1e-5));
  }
  {
    Rng trng(7);
    Tensor target = random_tensor({3, 3}, trng);
    std::vector<Tensor> inputs;
    inputs.push_back(random_tensor({3, 3}, rng));
    auto report = check_op(
        [target](Tape& t, const std::vector<VarId>& v) { return t.mse(v[0], target); },
        std::move(inputs), 18);
    results.push_back(from_report("gradcheck mse", report, 1e-6));
  }
  {
    // Negative control: a sign-flipped backward must be caught.
    LossAndGrad broken = [](const std::vector<Tensor>& ins, std::vector<Tensor>* grads) {
      Tape tape;
      VarId x = tape.leaf(ins[0], true);
      Rng wrng(19);
      Tensor w(ins[0].shape());
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = wrng.normal();
      VarId loss = tape.weighted_sum(tape.relu(x), w);
      const double value = tape.value(loss).scalar_value();
      if (grads) {
        tape.backward(loss);
        grads->clear();
        Tensor g = tape.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = -g[i];
        grads->push_back(std::move(g));
      }
      return value;
    };
    std::vector<Tensor> inputs;
    inputs.push_back(random_tensor({4, 4}, rng));
    auto report = grad_check(broken, std::move(inputs), 1e-5);
    CheckResult r;
    r.name = "gradcheck negative control (sign flip fails)";
    r.ok = !report.pass(1e-6);
    r.detail = report.summary();
    results.push_back(r);
  }
  return results;
}

CheckResult end_to_end_grad_check() {
  const ModelDims dims{8, 2, 2, 3, 2, 4};
  const std::size_t P = 10;

  Rng rng(424242);
  Window window;
  window.P = P;
  window.J = dims.J;
  window.features.resize(P * dims.J);
  for (double& v : window.features) v = rng.uniform01();
  PatchedWindow patched = patch(window, dims.K);
  Rng mask_rng(31337);
  patched = apply_mask(std::move(patched), 0.5, mask_rng);

  ModelParams params = ModelParams::init_autoencoder(dims, 5);
  const std::vector<Tensor*> tensors = params.tensor_list();
  std::vector<Tensor> inputs;
  inputs.reserve(tensors.size());
  for (const Tensor* t : tensors) inputs.push_back(*t);

  LossAndGrad fn = [&params, &patched](const std::vector<Tensor>& ins,
                                       std::vector<Tensor>* grads) {
    ModelParams local = params;
    const std::vector<Tensor*> slots = local.tensor_list();
    for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = ins[i];
    Tape tape;
    BoundParams bound = bind_params(tape, local, true);
    ForwardOptions opts{true, 0.0, 0};
    MaeOutput out = mae_forward(tape, bound, patched, opts, LossScope::all);
    const double value = tape.value(out.loss).scalar_value();
    if (grads) {
      tape.backward(out.loss);
      *grads = collect_param_grads(tape, bound);
    }
    return value;
  };
  auto report = grad_check(fn, std::move(inputs), 1e-5);
  return from_report("gradcheck full autoencoder loss (d=8,H=2,P=10,J=2)", report, 1e-4);
}

std::vector<CheckResult> numeric_invariant_checks() {
  std::vector<CheckResult> results;
  Rng rng(777);

  {
    CheckResult r{"softmax rows sum to 1 and are non-negative", true, ""};
    for (int trial = 0; trial < 20 && r.ok; ++trial) {
      Tape tape;
      Tensor x = random_tensor({4, 7}, rng, 3.0);
      VarId y = tape.softmax(tape.leaf(x, false));
      const Tensor& out = tape.value(y);
      for (std::size_t row = 0; row < 4; ++row) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 7; ++j) {
          const double v = out.at(row, j);
          if (v < 0.0) r.ok = false;
          sum += v;
        }
        if (std::fabs(sum - 1.0) > 1e-12) r.ok = false;
      }
    }
    results.push_back(r);
  }
  {
    CheckResult r{"layer_norm rows have mean 0 and variance 1", true, ""};
    Tensor gain = Tensor::full({9}, 1.0);
    Tensor shift({9});
    for (int trial = 0; trial < 20 && r.ok; ++trial) {
      Tape tape;
      Tensor x = random_tensor({5, 9}, rng, 2.5);
      VarId y = tape.layer_norm(tape.leaf(x, false), tape.leaf(gain, false),
                                tape.leaf(shift, false));
      const Tensor& out = tape.value(y);
      for (std::size_t row = 0; row < 5; ++row) {
        double mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < 9; ++j) mean += out.at(row, j);
        mean /= 9.0;
        for (std::size_t j = 0; j < 9; ++j) {
          const double d = out.at(row, j) - mean;
          var += d * d;
        }
        var /= 9.0;
        if (std::fabs(mean) > 1e-9 || std::fabs(var - 1.0) > 1e-9) r.ok = false;
      }
    }
    results.push_back(r);
  }
  {
    CheckResult r{"adam: zero gradient is a no-op, t increments", true, ""};
    Tensor p = random_tensor({3, 3}, rng);
    const Tensor before = p;
    std::vector<Tensor*> params{&p};
    AdamState adam(AdamConfig{0.01, 0.9, 0.999, 1e-8}, params);
    Tensor zero({3, 3});
    adam.step(params, {&zero});
    r.ok = adam.step_count() == 1;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] != before[i]) r.ok = false;
    }
    results.push_back(r);
  }
  {
    CheckResult r{"adam: first step moves by ~ -lr*sign(g)", true, ""};
    Tensor p = Tensor::scalar(1.0);
    std::vector<Tensor*> params{&p};
    AdamState adam(AdamConfig{0.01, 0.9, 0.999, 1e-12}, params);
    Tensor g = Tensor::scalar(3.7);
    adam.step(params, {&g});
    const double delta = p[0] - 1.0;
    if (std::fabs(delta + 0.01) > 1e-8) r.ok = false;
    results.push_back(r);
  }
  {
    CheckResult r{"positional embedding identities", true, ""};
    const auto p0 = positional_embedding(0, 8);
    for (std::size_t j = 0; j < 8; j += 2) {
      if (p0[j] != 0.0 || p0[j + 1] != 1.0) r.ok = false;
    }
    const auto p1 = positional_embedding(1, 8);
    if (std::fabs(p1[0] - std::sin(1.0)) > 1e-15) r.ok = false;
    for (std::size_t i : {0u, 3u, 17u}) {
      const auto p = positional_embedding(i, 16);
      for (std::size_t j = 0; j < 16; j += 2) {
        if (std::fabs(p[j] * p[j] + p[j + 1] * p[j + 1] - 1.0) > 1e-12) r.ok = false;
      }
    }
    results.push_back(r);
  }
  return results;
}

std::vector<CheckResult> partition_checks(std::size_t draws) {
  std::vector<CheckResult> results;
  Window window;
  window.P = 50;
  window.J = 2;
  window.features.assign(window.P * window.J, 0.5);
  const PatchedWindow base = patch(window, 3);

  {
    CheckResult r{"patching yields N=48 for P=50, K=3", base.N == 48, ""};
    results.push_back(r);
  }
  {
    CheckResult r{"mask counts for ratios 0.2/0.5/0.75 are 10/24/36", true, ""};
    r.ok = mask_count(0.2, 48) == 10 && mask_count(0.5, 48) == 24 &&
           mask_count(0.75, 48) == 36;
    results.push_back(r);
  }
  {
    CheckResult r{"mask/unmask sets partition 0..N-1 over seeded draws", true, ""};
    for (std::size_t s = 0; s < draws && r.ok; ++s) {
      Rng rng(mix_seed(99, s));
      const double ratio = (s % 3 == 0) ? 0.2 : (s % 3 == 1 ? 0.5 : 0.75);
      PatchedWindow masked = apply_mask(base, ratio, rng);
      const SplitSets sets = split_sets(masked);
      if (sets.masked.size() != mask_count(ratio, base.N)) r.ok = false;
      if (sets.masked.size() + sets.unmasked.size() != base.N) r.ok = false;
      std::vector<bool> seen(base.N, false);
      for (std::size_t idx : sets.masked) seen[idx] = !seen[idx] ? true : (r.ok = false);
      for (std::size_t idx : sets.unmasked) seen[idx] = !seen[idx] ? true : (r.ok = false);
      for (bool b : seen) {
        if (!b) r.ok = false;
      }
    }
    results.push_back(r);
  }
  return results;
}

bool run_selftest(std::ostream& out) {
  bool all_ok = true;
  auto emit = [&](const CheckResult& r) {
    out << (r.ok ? "[PASS] " : "[FAIL] ") << r.name;
    if (!r.detail.empty()) out << " — " << r.detail;
    out << "\n";
    all_ok = all_ok && r.ok;
  };
  for (const auto& r : gradient_checks()) emit(r);
  emit(end_to_end_grad_check());
  for (const auto& r : numeric_invariant_checks()) emit(r);
  for (const auto& r : partition_checks(200)) emit(r);
  out << (all_ok ? "selftest: all checks passed\n" : "selftest: FAILURES above\n");
  return all_ok;
}

}  // namespace rulmae
