#include <doctest.h>

#include <cmath>

#include "rulmae/adam.hpp"
#include "rulmae/error.hpp"
#include "rulmae/model.hpp"
#include "rulmae/rng.hpp"

using namespace rulmae;

namespace {

Window random_window(std::size_t P, std::size_t J, std::uint64_t seed,
                     bool labeled = false) {
  Window w;
  w.P = P;
  w.J = J;
  w.features.resize(P * J);
  Rng rng(seed);
  for (double& v : w.features) v = rng.uniform01();
  if (labeled) {
    std::vector<double> labels(P);
    for (std::size_t i = 0; i < P; ++i) labels[i] = static_cast<double>(P - i);
    w.labels = std::move(labels);
  }
  return w;
}

void zero_all(ModelParams& p) {
  p.for_each([](const std::string&, Tensor& t) { t.fill(0.0); });
}

}  // namespace

TEST_CASE("positional_embedding: index 0 alternates 0,1; odd dim raises") {
  const auto p0 = positional_embedding(0, 6);
  CHECK(p0 == std::vector<double>{0, 1, 0, 1, 0, 1});
  CHECK(positional_embedding(1, 4)[0] == doctest::Approx(std::sin(1.0)).epsilon(1e-15));
  CHECK_THROWS_AS(positional_embedding(1, 7), Error);
}

TEST_CASE("tokenize: zero inputs with zero weights leave only the positional term") {
  const ModelDims dims{8, 2, 1, 3, 2, 2};
  ModelParams params = ModelParams::init_autoencoder(dims, 1);
  zero_all(params);
  Window w;
  w.P = 10;
  w.J = 2;
  w.features.assign(20, 0.0);
  const PatchedWindow patched = patch(w, 3);
  Tape tape;
  const BoundParams bound = bind_params(tape, params, false);
  std::vector<std::size_t> all(patched.N);
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const LatentSet tokens = tokenize(tape, bound, patched, all);
  const Tensor& t = tape.value(tokens.tokens);
  REQUIRE(t.shape() == std::vector<std::size_t>{patched.N, dims.d});
  for (std::size_t s = 0; s < patched.N; ++s) {
    const auto want = positional_embedding(patched.centers[s], dims.d);
    for (std::size_t j = 0; j < dims.d; ++j) {
      CHECK(t.at(s, j) == doctest::Approx(want[j]).epsilon(1e-15));
    }
  }
}

TEST_CASE("tokenize: identical patches differ only by their positional embeddings") {
  const ModelDims dims{8, 2, 1, 3, 2, 2};
  const ModelParams params = ModelParams::init_autoencoder(dims, 3);
  Window w;
  w.P = 9;
  w.J = 2;
  w.features.assign(18, 0.0);
  // make rows 0..2 equal rows 5..7 so patches 0 and 5 hold identical data
  Rng rng(44);
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t j = 0; j < 2; ++j) {
      const double v = rng.uniform01();
      w.features[(0 + k) * 2 + j] = v;
      w.features[(5 + k) * 2 + j] = v;
    }
  }
  const PatchedWindow patched = patch(w, 3);
  Tape tape;
  const BoundParams bound = bind_params(tape, params, false);
  const LatentSet tokens = tokenize(tape, bound, patched, {0, 5});
  const Tensor& t = tape.value(tokens.tokens);
  const auto pe0 = positional_embedding(patched.centers[0], dims.d);
  const auto pe5 = positional_embedding(patched.centers[5], dims.d);
  for (std::size_t j = 0; j < dims.d; ++j) {
    CHECK(t.at(0, j) - t.at(1, j) == doctest::Approx(pe0[j] - pe5[j]).epsilon(1e-12));
  }
}

TEST_CASE("tokenize: output width is the model width for any patch count") {
  const ModelDims dims{16, 4, 2, 3, 3, 4};
  const ModelParams params = ModelParams::init_autoencoder(dims, 5);
  const Window w = random_window(14, 3, 6);
  const PatchedWindow patched = patch(w, 3);
  Tape tape;
  const BoundParams bound = bind_params(tape, params, false);
  const LatentSet tokens = tokenize(tape, bound, patched, {0, 3, 7});
  CHECK(tape.value(tokens.tokens).shape() == std::vector<std::size_t>{3, 16});
}

TEST_CASE("encode: preserves shape, deterministic in eval mode, rejects empty input") {
  const ModelDims dims{8, 2, 2, 3, 2, 4};
  const ModelParams params = ModelParams::init_autoencoder(dims, 7);
  const Window w = random_window(12, 2, 8);
  const PatchedWindow patched = patch(w, 3);
  std::vector<std::size_t> subset{0, 2, 5, 9};
  ForwardOptions opts;  // eval

  auto run = [&] {
    Tape tape;
    const BoundParams bound = bind_params(tape, params, false);
    Rng drop(0);
    const LatentSet tokens = tokenize(tape, bound, patched, subset);
    const LatentSet enc = encode(tape, bound, tokens, opts, drop);
    Tensor out = tape.value(enc.tokens);
    CHECK(enc.index_map == subset);
    return out;
  };
  const Tensor a = run();
  const Tensor b = run();
  REQUIRE(a.shape() == std::vector<std::size_t>{4, 8});
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("attention over a single token puts weight 1 on itself") {
  Tape tape;
  Tensor x({1, 4}, {0.3, -0.7, 1.1, 0.0});
  Tensor eye({4, 4});
  for (int i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
  Tensor zero({4});
  VarId xid = tape.leaf(x, false);
  VarId w = tape.leaf(eye, false);
  VarId b = tape.leaf(zero, false);
  VarId out = multi_head_attention(tape, xid, xid, xid, w, b, w, b, w, b, w, b, 2);
  // softmax over one key is 1, projections are the identity
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(tape.value(out).at(0, j) == doctest::Approx(x.at(0, j)).epsilon(1e-12));
  }
}

TEST_CASE("multi_head_attention rejects head counts that do not divide d") {
  Tape tape;
  Tensor x({2, 6});
  Tensor w({6, 6});
  Tensor b({6});
  VarId xid = tape.leaf(x, false);
  VarId wid = tape.leaf(w, false);
  VarId bid = tape.leaf(b, false);
  CHECK_THROWS_AS(
      multi_head_attention(tape, xid, xid, xid, wid, bid, wid, bid, wid, bid, wid, bid, 4),
      Error);
}

TEST_CASE("restore: masked rows become exactly their positional embeddings") {
  const std::size_t d = 8, K = 3, N = 5;
  Tape tape;
  Rng rng(11);
  Tensor visible({2, d});
  for (std::size_t i = 0; i < visible.size(); ++i) visible[i] = rng.normal();
  LatentSet latent{tape.leaf(visible, false), {0, 2}};
  const LatentSet full = restore(tape, latent, {1, 3, 4}, N, K, d);
  const Tensor& out = tape.value(full.tokens);
  REQUIRE(out.shape() == std::vector<std::size_t>{N, d});
  REQUIRE(full.index_map == std::vector<std::size_t>{0, 1, 2, 3, 4});
  for (std::size_t s : {std::size_t{1}, std::size_t{3}, std::size_t{4}}) {
    const auto pe = positional_embedding(s + (K - 1) / 2, d);
    for (std::size_t j = 0; j < d; ++j) {
      CHECK(out.at(s, j) == pe[j]);  // zero token plus embedding, elementwise
    }
  }
  // visible rows keep their content plus a fresh positional term
  const auto pe0 = positional_embedding(0 + (K - 1) / 2, d);
  for (std::size_t j = 0; j < d; ++j) {
    CHECK(out.at(0, j) == doctest::Approx(visible.at(0, j) + pe0[j]).epsilon(1e-15));
  }
}

TEST_CASE("restore: no masked indices re-adds embeddings and keeps order") {
  const std::size_t d = 6, K = 3, N = 3;
  Tape tape;
  Tensor visible({3, d});
  LatentSet latent{tape.leaf(visible, false), {0, 1, 2}};
  const LatentSet full = restore(tape, latent, {}, N, K, d);
  const Tensor& out = tape.value(full.tokens);
  for (std::size_t s = 0; s < N; ++s) {
    const auto pe = positional_embedding(s + 1, d);
    for (std::size_t j = 0; j < d; ++j) CHECK(out.at(s, j) == pe[j]);
  }
}

TEST_CASE("restore: colliding masked index raises IndexOverlap; bad counts mismatch") {
  const std::size_t d = 4;
  Tape tape;
  Tensor visible({2, d});
  LatentSet latent{tape.leaf(visible, false), {0, 2}};
  CHECK_THROWS_AS(restore(tape, latent, {2}, 3, 3, d), Error);
  CHECK_THROWS_AS(restore(tape, latent, {1}, 5, 3, d), Error);
}

TEST_CASE("overlap averaging: contribution counts at the boundaries") {
  // cols=1, K=3, N=5 -> P=7; a single 1 in patch 0 slot 0 lands on step 0
  // undiluted; one 1 covering an interior step is averaged over 3.
  Tape tape;
  Tensor x({5, 3});
  x.at(0, 0) = 1.0;
  VarId out = tape.overlap_average(tape.leaf(x, false), 7, 3, 1);
  CHECK(tape.value(out).at(0, 0) == doctest::Approx(1.0));

  Tape tape2;
  Tensor y({5, 3});
  y.at(2, 1) = 1.0;  // covers step 3, which also gets patches 1 and 3
  VarId out2 = tape2.overlap_average(tape2.leaf(y, false), 7, 3, 1);
  CHECK(tape2.value(out2).at(3, 0) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("autoencoder forward: reconstruction has the window's shape") {
  const ModelDims dims{16, 4, 2, 3, 4, 4};
  const ModelParams params = ModelParams::init_autoencoder(dims, 21);
  const Window w = random_window(50, 4, 22);
  PatchedWindow patched = patch(w, 3);
  Rng mrng(1);
  patched = apply_mask(std::move(patched), 0.5, mrng);
  Tape tape;
  const BoundParams bound = bind_params(tape, params, false);
  ForwardOptions opts;
  const MaeOutput out = mae_forward(tape, bound, patched, opts, LossScope::all);
  CHECK(tape.value(out.recon).shape() == std::vector<std::size_t>{50, 4});
  CHECK(tape.value(out.patch_preds).shape() == std::vector<std::size_t>{48, 12});
  CHECK(std::isfinite(tape.value(out.loss).scalar_value()));
}

TEST_CASE("recon_loss: identity is 0; constant offset costs its square") {
  Window w = random_window(10, 3, 30);
  const PatchedWindow patched = patch(w, 3);
  Tape tape;
  Tensor same({10, 3}, std::vector<double>(w.features));
  VarId recon = tape.leaf(same, false);
  CHECK(tape.value(recon_loss(tape, recon, w)).scalar_value() == 0.0);

  Tensor offset = same;
  for (std::size_t i = 0; i < offset.size(); ++i) offset[i] += 0.3;
  VarId recon2 = tape.leaf(offset, false);
  CHECK(tape.value(recon_loss(tape, recon2, w)).scalar_value() ==
        doctest::Approx(0.09).epsilon(1e-12));
}

TEST_CASE("recon_loss: random instance matches an independent evaluation") {
  Window w;
  w.P = 2;
  w.J = 2;
  Rng rng(55);
  w.features.resize(4);
  for (double& v : w.features) v = rng.normal();
  Tensor pred({2, 2});
  for (std::size_t i = 0; i < 4; ++i) pred[i] = rng.normal();
  double want = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    want += (pred[i] - w.features[i]) * (pred[i] - w.features[i]);
  }
  want /= 4.0;
  Tape tape;
  VarId loss = recon_loss(tape, tape.leaf(pred, false), w);
  CHECK(tape.value(loss).scalar_value() == doctest::Approx(want).epsilon(1e-15));
}

TEST_CASE("predict_rul: P outputs, zero head predicts zero, eval is deterministic") {
  const ModelDims dims{8, 2, 1, 3, 2, 2};
  ModelParams params = ModelParams::init_regressor(dims, 40);
  const Window w = random_window(50, 2, 41);
  const PatchedWindow patched = patch(w, 3);
  ForwardOptions opts;

  auto run = [&](const ModelParams& p) {
    Tape tape;
    const BoundParams bound = bind_params(tape, p, false);
    Rng drop(0);
    VarId pred = predict_rul(tape, bound, patched, opts, drop);
    return tape.value(pred);
  };
  const Tensor a = run(params);
  REQUIRE(a.shape() == std::vector<std::size_t>{50, 1});
  const Tensor b = run(params);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  params.rul_w.fill(0.0);
  params.rul_b.fill(0.0);
  const Tensor z = run(params);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(z[i] == 0.0);
}

TEST_CASE("rul_loss: identity, hand value, and the all-masked guard") {
  Tape tape;
  Tensor pred({2, 1}, {1.0, 3.0});
  VarId p = tape.leaf(pred, false);
  std::vector<double> labels{0.0, 0.0};
  CHECK(tape.value(rul_loss(tape, p, labels, {1, 1})).scalar_value() ==
        doctest::Approx(5.0));
  std::vector<double> same{1.0, 3.0};
  CHECK(tape.value(rul_loss(tape, p, same, {1, 1})).scalar_value() == 0.0);
  CHECK_THROWS_AS(rul_loss(tape, p, labels, {0, 0}), Error);
}

TEST_CASE("transfer_encoder: encoder groups copied bitwise, head fresh, forward finite") {
  const ModelDims dims{8, 2, 2, 3, 2, 4};
  const ModelParams mae = ModelParams::init_autoencoder(dims, 50);
  const ModelParams rul_a = transfer_encoder(mae, 60);
  const ModelParams rul_b = transfer_encoder(mae, 61);

  CHECK(rul_a.token_proj_w.vec() == mae.token_proj_w.vec());
  CHECK(rul_a.tokenizer_conv.value_k.vec() == mae.tokenizer_conv.value_k.vec());
  CHECK(rul_a.tokenizer_conv.gate_b.vec() == mae.tokenizer_conv.gate_b.vec());
  REQUIRE(rul_a.encoder_layers.size() == mae.encoder_layers.size());
  for (std::size_t i = 0; i < mae.encoder_layers.size(); ++i) {
    CHECK(rul_a.encoder_layers[i].wq.vec() == mae.encoder_layers[i].wq.vec());
    CHECK(rul_a.encoder_layers[i].ff2_w.vec() == mae.encoder_layers[i].ff2_w.vec());
    CHECK(rul_a.encoder_layers[i].ln2_g.vec() == mae.encoder_layers[i].ln2_g.vec());
  }
  CHECK(rul_a.has_rul_head);
  CHECK_FALSE(rul_a.has_decoder);
  CHECK(rul_a.rul_w.vec() != rul_b.rul_w.vec());  // fresh seeded head

  const Window w = random_window(12, 2, 62);
  const PatchedWindow patched = patch(w, 3);
  Tape tape;
  const BoundParams bound = bind_params(tape, rul_a, false);
  ForwardOptions opts;
  Rng drop(0);
  VarId pred = predict_rul(tape, bound, patched, opts, drop);
  CHECK(tape.value(pred).all_finite());
}

TEST_CASE("encoder output permutes with its input tokens") {
  const ModelDims dims{8, 2, 2, 3, 2, 4};
  const ModelParams params = ModelParams::init_autoencoder(dims, 70);
  Rng rng(71);
  Tensor tokens({5, 8});
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = rng.normal();
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Tensor permuted({5, 8});
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t j = 0; j < 8; ++j) permuted.at(r, j) = tokens.at(perm[r], j);
  }
  ForwardOptions opts;

  auto encode_tokens = [&](const Tensor& in) {
    Tape tape;
    const BoundParams bound = bind_params(tape, params, false);
    Rng drop(0);
    LatentSet latent{tape.leaf(in, false), {0, 1, 2, 3, 4}};
    const LatentSet out = encode(tape, bound, latent, opts, drop);
    return tape.value(out.tokens);
  };
  const Tensor base = encode_tokens(tokens);
  const Tensor shuffled = encode_tokens(permuted);
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(shuffled.at(r, j) == doctest::Approx(base.at(perm[r], j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("shape pipeline: window -> patches -> visible -> restored -> reconstruction") {
  const ModelDims dims{8, 2, 2, 3, 3, 4};
  const ModelParams params = ModelParams::init_autoencoder(dims, 80);
  for (std::size_t P : {std::size_t{10}, std::size_t{50}}) {
    const Window w = random_window(P, 3, 81 + P);
    PatchedWindow patched = patch(w, 3);
    Rng mrng(82);
    patched = apply_mask(std::move(patched), 0.5, mrng);
    const SplitSets sets = split_sets(patched);
    Tape tape;
    const BoundParams bound = bind_params(tape, params, false);
    ForwardOptions opts;
    Rng drop(0);
    const LatentSet tokens = tokenize(tape, bound, patched, sets.unmasked);
    CHECK(tape.value(tokens.tokens).shape() ==
          std::vector<std::size_t>{sets.unmasked.size(), dims.d});
    const LatentSet enc = encode(tape, bound, tokens, opts, drop);
    const LatentSet full = restore(tape, enc, sets.masked, patched.N, dims.K, dims.d);
    CHECK(tape.value(full.tokens).shape() == std::vector<std::size_t>{patched.N, dims.d});
    VarId preds = decode_patches(tape, bound, full.tokens, opts, drop);
    VarId recon = reconstruct_window(tape, preds, P, dims.K, dims.J);
    CHECK(tape.value(recon).shape() == std::vector<std::size_t>{P, 3});
  }
}

TEST_CASE("masked-only loss scope scores only masked patches") {
  const ModelDims dims{8, 2, 1, 3, 2, 2};
  ModelParams params = ModelParams::init_autoencoder(dims, 90);
  zero_all(params);
  // With all-zero parameters the patch predictions are all zero, so the
  // masked-only loss is the mean square of the masked patches' data.
  Window w = random_window(8, 2, 91);
  PatchedWindow patched = patch(w, 3);
  patched.mask.assign(patched.N, 0);
  patched.mask[1] = 1;
  Tape tape;
  const BoundParams bound = bind_params(tape, params, false);
  ForwardOptions opts;
  const MaeOutput out = mae_forward(tape, bound, patched, opts, LossScope::masked_only);
  double want = 0.0;
  for (std::size_t k = 0; k < patched.K; ++k) {
    for (std::size_t j = 0; j < patched.J; ++j) {
      const double v = patched.patches[(1 * patched.K + k) * patched.J + j];
      want += v * v;
    }
  }
  want /= static_cast<double>(patched.K * patched.J);
  CHECK(tape.value(out.loss).scalar_value() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("single repeated sample is autoencoded to near zero loss") {
  // Masking off, dropout off: the reconstruction objective is minimizable on
  // one sample well below 1e-3 within 500 steps.
  const ModelDims dims{16, 2, 2, 3, 3, 4};
  ModelParams params = ModelParams::init_autoencoder(dims, 100);
  const Window w = random_window(20, 3, 101);
  const PatchedWindow patched = patch(w, 3);  // all-zero mask
  std::vector<Tensor*> tensors = params.tensor_list();
  AdamState adam(AdamConfig{0.002, 0.9, 0.999, 1e-8}, tensors);
  double loss = 0.0;
  std::size_t steps = 0;
  for (; steps < 500; ++steps) {
    Tape tape;
    const BoundParams bound = bind_params(tape, params, true);
    ForwardOptions opts{true, 0.0, 0};
    const MaeOutput out = mae_forward(tape, bound, patched, opts, LossScope::all);
    loss = tape.value(out.loss).scalar_value();
    if (loss < 1e-3) break;
    tape.backward(out.loss);
    const std::vector<Tensor> grads = collect_param_grads(tape, bound);
    std::vector<const Tensor*> gptrs;
    for (const Tensor& g : grads) gptrs.push_back(&g);
    adam.step(tensors, gptrs);
  }
  INFO("loss ", loss, " after ", steps, " steps");
  CHECK(loss < 1e-3);
}
