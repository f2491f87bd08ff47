// Acceptance suite: one PASS/FAIL line per criterion. Runs on the default
// desk configuration with one pretrained backbone shared by all checks.

#include <chrono>
#include <cstdlib>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mmrl/cli.hpp"
#include "mmrl/config.hpp"
#include "mmrl/errors.hpp"
#include "mmrl/serialization.hpp"

using namespace mmrl;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return INFINITY;
  return (a - b).cwiseAbs().maxCoeff();
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

Matrix random_image(int size, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix m(size, size * 3);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

struct Features {
  Matrix f_c;
  Matrix f_r;  // empty when absent
};

Features image_features(const Matrix& image, const DualEncoder& enc, const AdapterState& state,
                        const ForwardProbe* probe = nullptr) {
  Graph g;
  const bool repr = state.has_repr_features();
  const ImageFeatures f = extract_image_features(g, vision_forward_mmrl(g, image, enc, state, probe), enc, state, repr);
  return {f.class_feature.value(), repr ? f.repr_feature->value() : Matrix()};
}

Matrix text_features(int token, const DualEncoder& enc, const AdapterState& state,
                     const ForwardProbe* probe = nullptr) {
  Graph g;
  return extract_text_features(g, text_forward_mmrl(g, tokenize(kDefaultTemplate, token), enc, state, probe), enc)
      .value();
}

// Everything the criteria share: the default corpus, the pretrained frozen
// backbone and the base-class training set.
struct Fixture {
  RunConfig cfg;
  TaskCorpus corpus;
  DualEncoder enc;
  SplitSpec split;
  double pretrain_seconds = 0;

  AdapterState fresh_state(std::uint64_t seed, Index tokens = -1) const {
    AblationCell cell = cfg.cell();
    if (tokens >= 0) cell.tokens = tokens;
    return init_representation_state(adapter_dims(enc, cell.tokens, cell.space_dim, cell.insert_layer), enc, seed,
                                     cell.variant);
  }

  TrainingSet training_set(std::uint64_t seed) const {
    return TrainingSet{&corpus, few_shot_sample(corpus, cfg.get_int("shots"), split, seed), split.base};
  }
};

struct LearnRun {
  AdapterState state;
  TrainResult result;
  TrainingSet data;
  int first_perfect_epoch = 0;  // 0 = never
};

// Trains until base-train accuracy hits 100% (but at least `min_epochs`),
// or for exactly `max_epochs` when `run_all` is set.
LearnRun learn(const Fixture& fx, std::uint64_t seed, int min_epochs, int max_epochs, bool run_all) {
  LearnRun run{fx.fresh_state(seed), {}, fx.training_set(seed), 0};
  TrainConfig tc = fx.cfg.train();
  tc.seed = seed;
  tc.epochs = max_epochs;
  const double alpha = tc.weights.alpha;
  run.result = train(run.data, fx.enc, run.state, tc, [&](int epoch, const AdapterState& s) {
    if (run.first_perfect_epoch == 0 &&
        readout_accuracy(fx.corpus, run.data.items, fx.split.base, fx.enc, s, true, alpha) == 100.0) {
      run.first_perfect_epoch = epoch;
    }
    return run_all || epoch < min_epochs || run.first_perfect_epoch == 0;
  });
  return run;
}

// --- criteria -------------------------------------------------------------

Outcome gradient_fidelity(const Fixture& fx) {
  const auto t0 = Clock::now();
  AdapterState state = fx.fresh_state(11);
  const TrainingSet data = fx.training_set(11);
  TrainConfig tc = fx.cfg.train();
  tc.epochs = 1;
  tc.seed = 11;
  train(data, fx.enc, state, tc);  // move away from the initialization point
  ag::GradCheckOptions opts;
  opts.epsilon = 1e-5;
  opts.max_coordinates = 8;
  opts.seed = 11;
  const auto report = gradcheck_objective(data, fx.enc, state, tc, 2, opts);
  const double secs = seconds_since(t0);
  std::set<std::string> expected;
  for (const auto& p : state.trainable_parameters()) expected.insert(p.name);
  const bool covers = report.tensors.size() == expected.size();
  return {report.max_rel_error < 1e-4 && secs < 300 && covers,
          fmt("max rel err %.2e over %zu coordinates in %zu tensors (R, F maps, P_v^r), %.1f s",
              report.max_rel_error, report.coordinates, report.tensors.size(), secs)};
}

Outcome degenerate_equivalence(const Fixture& fx) {
  const AdapterState state = fx.fresh_state(5, 0);
  Rng rng(2024);
  std::uniform_int_distribution<int> token(3, fx.enc.config().vocab_size - 1);
  int mismatches = 0;
  for (int i = 0; i < 100; ++i) {
    const Matrix image = random_image(fx.enc.config().image_size, rng);
    if (!bitwise_equal(image_features(image, fx.enc, state).f_c, image_feature(image, fx.enc))) ++mismatches;
    const std::vector<int> pair{token(rng), token(rng)};
    const Matrix w0 = encode_classifiers(pair, kDefaultTemplate, fx.enc);
    if (!bitwise_equal(text_features(pair[0], fx.enc, state), w0.row(0))) ++mismatches;
  }
  // Regularizers on corpus data at K=0.
  Graph g;
  const auto tokens = fx.corpus.class_tokens;
  const Var w = class_text_features(g, tokens, kDefaultTemplate, fx.enc, state);
  const Var w0 = g.constant(encode_classifiers(tokens, kDefaultTemplate, fx.enc));
  const double reg_t = cos_reg_text(w, w0).value()(0, 0);
  double reg_v_max = 0;
  for (auto idx : fx.corpus.indices(Split::test)) {
    const Matrix& img = fx.corpus.items[idx].image;
    const Var fc = g.constant(image_features(img, fx.enc, state).f_c);
    reg_v_max = std::max(reg_v_max, std::abs(cos_reg_image(fc, g.constant(image_feature(img, fx.enc))).value()(0, 0)));
  }
  return {mismatches == 0 && reg_t == 0.0 && reg_v_max == 0.0,
          fmt("%d/200 bitwise mismatches (f_c, w); L_cos^t = %g, max L_cos^v = %g", mismatches, reg_t, reg_v_max)};
}

Outcome freezing(const std::string& before, const std::string& after, int epochs) {
  return {before == after && epochs == 50,
          fmt("backbone SHA-256 %s… %s after %d epochs", before.substr(0, 16).c_str(),
              before == after ? "unchanged" : "CHANGED", epochs)};
}

Outcome decoupling(const Fixture& fx, const AdapterState& trained) {
  AdapterState perturbed = trained;
  Rng rng(77);
  std::normal_distribution<double> noise(0.0, 0.1);
  for (Tensor* t : {&perturbed.repr.projection.weight, &perturbed.repr.projection.bias}) {
    for (Index i = 0; i < t->size(); ++i) t->mutable_value().data()[i] += noise(rng);
  }
  const double tau = fx.enc.temperature();
  std::vector<int> base_tokens, novel_tokens;
  for (int c : fx.split.base) base_tokens.push_back(fx.corpus.class_tokens[static_cast<std::size_t>(c)]);
  for (int c : fx.split.novel) novel_tokens.push_back(fx.corpus.class_tokens[static_cast<std::size_t>(c)]);
  const Matrix wb = adapted_classifiers(base_tokens, kDefaultTemplate, fx.enc, trained);
  const Matrix wn = adapted_classifiers(novel_tokens, kDefaultTemplate, fx.enc, trained);
  double novel_diff = 0, base_diff = 0;
  for (auto idx : fx.corpus.indices(Split::test, fx.split.novel)) {
    const Matrix& img = fx.corpus.items[idx].image;
    novel_diff = std::max(novel_diff, max_abs_diff(predict_novel(img, fx.enc, trained, wn, tau),
                                                   predict_novel(img, fx.enc, perturbed, wn, tau)));
  }
  for (auto idx : fx.corpus.indices(Split::test, fx.split.base)) {
    const Matrix& img = fx.corpus.items[idx].image;
    base_diff = std::max(base_diff, max_abs_diff(predict_base(img, fx.enc, trained, wb, 0.7, tau),
                                                 predict_base(img, fx.enc, perturbed, wb, 0.7, tau)));
  }
  return {novel_diff < 1e-12 && base_diff > 1e-6,
          fmt("novel max |dp| = %.3g, base max |dp| = %.3g (alpha 0.7, K=%ld)", novel_diff, base_diff,
              static_cast<long>(trained.dims.tokens))};
}

Outcome permutation_invariance(const Fixture& fx, const AdapterState& trained) {
  Rng rng(99);
  const auto test = fx.corpus.indices(Split::test);
  std::vector<std::size_t> images(test.begin(), test.begin() + 4);
  std::vector<Features> ref;
  for (auto idx : images) ref.push_back(image_features(fx.corpus.items[idx].image, fx.enc, trained));
  const auto tokens = fx.corpus.class_tokens;
  const Matrix w_ref = adapted_classifiers(tokens, kDefaultTemplate, fx.enc, trained);
  double worst = 0;
  std::vector<Index> order(static_cast<std::size_t>(trained.dims.tokens));
  std::iota(order.begin(), order.end(), Index{0});
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(order.begin(), order.end(), rng);
    AdapterState s = trained;
    const Matrix& r = trained.space.tokens.value();
    for (Index k = 0; k < r.rows(); ++k) s.space.tokens.mutable_value().row(k) = r.row(order[static_cast<std::size_t>(k)]);
    for (std::size_t i = 0; i < images.size(); ++i) {
      const Features f = image_features(fx.corpus.items[images[i]].image, fx.enc, s);
      worst = std::max({worst, max_abs_diff(f.f_c, ref[i].f_c), max_abs_diff(f.f_r, ref[i].f_r)});
    }
    worst = std::max(worst, max_abs_diff(adapted_classifiers(tokens, kDefaultTemplate, fx.enc, s), w_ref));
  }
  return {worst < 1e-12, fmt("max change in f_c, f_r, w over 20 permutations of R: %.3g", worst)};
}

Outcome slot_replacement(const Fixture& fx, const AdapterState& trained) {
  const int J = trained.dims.insert_layer;
  const int L = trained.dims.layers;
  const Index K = trained.dims.tokens;
  Rng rng(31);
  std::normal_distribution<double> garbage(0.0, 5.0);
  int overwritten = 0;
  ForwardProbe probe;
  probe.on_layer_output = [&](int layer, Matrix& out) {
    if (layer < J || layer > L - 1) return;
    for (Index r = 1; r <= K; ++r) {
      for (Index c = 0; c < out.cols(); ++c) out(r, c) = garbage(rng);
    }
    ++overwritten;
  };
  double worst = 0;
  const auto test = fx.corpus.indices(Split::test);
  for (std::size_t i = 0; i < 6; ++i) {
    const Matrix& img = fx.corpus.items[test[i * 5]].image;
    const Features a = image_features(img, fx.enc, trained);
    const Features b = image_features(img, fx.enc, trained, &probe);
    worst = std::max({worst, max_abs_diff(a.f_c, b.f_c), max_abs_diff(a.f_r, b.f_r)});
  }
  for (int token : fx.corpus.class_tokens) {
    worst = std::max(worst, max_abs_diff(text_features(token, fx.enc, trained),
                                         text_features(token, fx.enc, trained, &probe)));
  }
  const int expected = (6 + static_cast<int>(fx.corpus.class_tokens.size())) * (L - J);
  return {worst < 1e-12 && overwritten == expected,
          fmt("randomized slots at layers %d..%d in %d forwards; max feature change %.3g", J, L - 1, overwritten,
              worst)};
}

Outcome mask_causality(const Fixture& fx, const AdapterState& trained) {
  long future_weights = 0, nonzero_future = 0;
  bool triangular = true;
  ForwardProbe probe;
  probe.on_attention = [&](int, const std::vector<Matrix>& weights, const AttentionMask& mask) {
    triangular = triangular && mask.is_lower_triangular();
    for (const auto& w : weights) {
      for (Index p = 0; p < w.rows(); ++p) {
        for (Index q = p + 1; q < w.cols(); ++q) {
          ++future_weights;
          if (w(p, q) != 0.0) ++nonzero_future;
        }
      }
    }
  };
  for (int token : fx.corpus.class_tokens) text_features(token, fx.enc, trained, &probe);

  Rng rng(13);
  std::uniform_int_distribution<int> tok(3, fx.enc.config().vocab_size - 1);
  const Index room = fx.enc.config().max_text_length - trained.dims.tokens;
  int changed = 0, trials = 0;
  for (int t = 0; t < 100; ++t) {
    TokenSequence s = tokenize(kDefaultTemplate, tok(rng));
    Graph g;
    const Matrix before = text_forward_mmrl(g, s, fx.enc, trained).value();
    const Index extra = 1 + t % std::max<Index>(1, room - static_cast<Index>(s.ids.size()));
    if (static_cast<Index>(s.ids.size()) + extra > room) continue;
    for (Index e = 0; e < extra; ++e) s.ids.push_back(tok(rng));
    ++trials;
    if (!bitwise_equal(before, text_forward_mmrl(g, s, fx.enc, trained).value())) ++changed;
  }
  return {triangular && nonzero_future == 0 && changed == 0 && trials > 0,
          fmt("%ld future weights all exactly 0; e_L changed in %d/%d appended-token trials", future_weights,
              changed, trials)};
}

Outcome hm_formula() {
  const double hm = harmonic_mean(85.68, 77.16);
  return {std::abs(hm - 81.20) <= 0.01, fmt("harmonic_mean(85.68, 77.16) = %.4f", hm)};
}

Outcome learnability(const std::vector<LearnRun>& runs, double seconds) {
  int ok = 0;
  std::string detail;
  for (const auto& run : runs) {
    const auto means = epoch_mean_loss(run.result.trace);
    bool decreasing = means.size() >= 10;
    for (std::size_t e = 1; decreasing && e < 10; ++e) decreasing = means[e] < means[e - 1];
    const bool perfect = run.first_perfect_epoch >= 1 && run.first_perfect_epoch <= 50;
    ok += decreasing && perfect;
    detail += fmt("[100%% at epoch %d, first-10 loss %s] ", run.first_perfect_epoch,
                  decreasing ? "strictly decreasing" : "NOT decreasing");
  }
  return {ok == 3 && seconds < 600, fmt("%d/3 seeds: %s%.1f s", ok, detail.c_str(), seconds)};
}

Outcome regularization_pull(const Fixture& fx) {
  const std::vector<double> lambdas{0.0, 0.5, 2.0, 4.0};
  std::vector<double> means;
  for (double lambda : lambdas) {
    double sum = 0;
    for (std::uint64_t seed : {1, 2, 3}) {
      AdapterState state = fx.fresh_state(seed);
      const TrainingSet data = fx.training_set(seed);
      TrainConfig tc = fx.cfg.train();
      tc.seed = seed;
      tc.weights.lambda = lambda;
      train(data, fx.enc, state, tc);
      // Regularizer of the final state over the whole training set.
      Graph g;
      const LossTerms t = batch_loss(g, data, data.items, fx.enc, state,
                                     encode_classifiers(data.class_tokens(), kDefaultTemplate, fx.enc), tc);
      sum += t.reg_vision.value()(0, 0) + t.reg_text.value()(0, 0);
    }
    means.push_back(sum / 3.0);
  }
  bool monotone = true;
  for (std::size_t i = 1; i < means.size(); ++i) monotone = monotone && means[i] <= means[i - 1];
  return {monotone, fmt("mean final L_cos^v + L_cos^t for lambda 0/0.5/2/4: %.5f %.5f %.5f %.5f", means[0], means[1],
                        means[2], means[3])};
}

struct Workspace {
  fs::path dir;
  std::vector<std::string> args(const std::string& command, const std::vector<std::string>& extra = {}) const {
    std::vector<std::string> a{"mmrl", command,
                               "--manifest", (dir / "corpus.mmrl").string(),
                               "--checkpoint", (dir / "backbone.ckpt").string(),
                               "--bundle", (dir / "adapter.bundle").string(),
                               "--loss-csv", (dir / "loss.csv").string(),
                               "--results", (dir / "results.json").string(),
                               "--log", (dir / "run.log").string()};
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
  }
};

int cli(const std::vector<std::string>& args, std::string* err_text = nullptr) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (err_text) *err_text = err.str();
  return code;
}

Workspace make_workspace(const Fixture& fx, const std::string& name) {
  Workspace ws{fs::temp_directory_path() / ("mmrl_acceptance_" + name)};
  fs::remove_all(ws.dir);
  fs::create_directories(ws.dir);
  save_manifest(fx.corpus, ws.dir / "corpus.mmrl");
  fx.enc.save(ws.dir / "backbone.ckpt");
  return ws;
}

Outcome protocol_integrity(const Fixture& fx) {
  int bad_splits = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const SplitSpec s = base_novel_split(fx.corpus.num_classes, seed);
    std::set<int> all(s.base.begin(), s.base.end());
    bool ok = s.base.size() == static_cast<std::size_t>((fx.corpus.num_classes + 1) / 2);
    for (int c : s.novel) ok = ok && all.insert(c).second;
    ok = ok && static_cast<int>(all.size()) == fx.corpus.num_classes;
    const auto items = few_shot_sample(fx.corpus, 16, s, seed);
    for (auto i : items) {
      const Item& it = fx.corpus.items[i];
      ok = ok && it.split == Split::fewshot_pool && std::count(s.base.begin(), s.base.end(), it.label) == 1;
    }
    bad_splits += !ok;
  }

  // A bundle whose training items include a novel-class image.
  const Workspace ws = make_workspace(fx, "leak");
  AdapterState state = fx.fresh_state(1);
  auto items = few_shot_sample(fx.corpus, 16, fx.split, 1);
  items.push_back(fx.corpus.indices(Split::fewshot_pool, fx.split.novel).front());
  std::string joined;
  for (std::size_t i = 0; i < items.size(); ++i) joined += (i ? "," : "") + std::to_string(items[i]);
  state.save(ws.dir / "adapter.bundle", {{"config_hash", "leak"},
                                         {"backbone_hash", fx.enc.content_hash()},
                                         {"split_seed", std::to_string(fx.corpus.seed)},
                                         {"train_items", joined}});
  std::string err;
  const int code = cli(ws.args("eval"), &err);
  fs::remove_all(ws.dir);
  const bool mentions = err.find("protocol error") != std::string::npos;
  return {bad_splits == 0 && code == 3 && mentions,
          fmt("%d/100 split seeds violate disjointness/coverage; leaked bundle -> exit %d", bad_splits, code)};
}

Outcome reproducibility(const Fixture& fx) {
  std::vector<std::string> payloads, csvs;
  int failures = 0;
  for (const char* name : {"repro_a", "repro_b"}) {
    const Workspace ws = make_workspace(fx, name);
    failures += cli(ws.args("train", {"--seed", "4"})) != 0;
    failures += cli(ws.args("eval", {"--seed", "4"})) != 0;
    payloads.push_back(read_file(ws.dir / "results.json"));
    csvs.push_back(read_file(ws.dir / "loss.csv"));
    fs::remove_all(ws.dir);
  }
  const bool same = payloads[0] == payloads[1] && csvs[0] == csvs[1];
  return {failures == 0 && same,
          fmt("EvalRecord JSON %zu bytes, %s; loss CSV %s", payloads[0].size(),
              payloads[0] == payloads[1] ? "byte-identical" : "DIFFERENT",
              csvs[0] == csvs[1] ? "byte-identical" : "DIFFERENT")};
}

}  // namespace

// Optional arguments select criteria by number; no arguments runs all twelve.
int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  auto wanted = [&](int id) { return selected.empty() || selected.count(id) > 0; };

  int failed = 0;
  int ran = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    if (!wanted(id)) return;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    ++ran;
    failed += !o.pass;
    std::printf("%s  %2d %-26s %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
  };

  const auto t_all = Clock::now();
  Fixture fx{RunConfig{}, {}, {}, {}, 0};
  fx.cfg.resolve();
  fx.corpus = generate_corpus(fx.cfg.get_int("classes"), fx.cfg.get_int("items_per_class"), fx.cfg.get_double("noise"),
                              fx.cfg.get_u64("corpus_seed"), fx.cfg.get_int("image_size"));
  fx.split = base_novel_split(fx.corpus.num_classes, fx.corpus.seed);
  fx.enc = DualEncoder::init(fx.cfg.backbone(), fx.cfg.get_u64("backbone_seed"));
  pretrain_surrogate(fx.corpus, fx.enc, fx.cfg.pretrain());
  fx.pretrain_seconds = seconds_since(t_all);
  std::printf("# desk config %s, backbone pretrained in %.1f s\n", fx.cfg.hash().c_str(), fx.pretrain_seconds);

  report(1, "gradient fidelity", [&] { return gradient_fidelity(fx); });
  report(2, "degenerate equivalence", [&] { return degenerate_equivalence(fx); });

  // Criteria 3-7 and 9 share three training runs; the seed-1 run goes the
  // full 50 epochs and serves as the trained state.
  std::vector<LearnRun> runs;
  std::string hash_before, hash_after, learn_error;
  double learn_seconds = 0;
  if (wanted(3) || wanted(4) || wanted(5) || wanted(6) || wanted(7) || wanted(9)) {
    try {
      const auto t_learn = Clock::now();
      hash_before = fx.enc.content_hash();
      runs.push_back(learn(fx, 1, 10, 50, true));
      hash_after = fx.enc.content_hash();
      runs.push_back(learn(fx, 2, 10, 50, false));
      runs.push_back(learn(fx, 3, 10, 50, false));
      learn_seconds = seconds_since(t_learn) + fx.pretrain_seconds;
    } catch (const std::exception& e) {
      learn_error = e.what();
    }
  }
  auto with_runs = [&](const std::function<Outcome()>& fn) {
    return [&, fn] { return learn_error.empty() ? fn() : Outcome{false, "training failed: " + learn_error}; };
  };

  report(3, "freezing", with_runs([&] { return freezing(hash_before, hash_after, runs.front().result.epochs_run); }));
  report(4, "decoupling", with_runs([&] { return decoupling(fx, runs.front().state); }));
  report(5, "permutation invariance", with_runs([&] { return permutation_invariance(fx, runs.front().state); }));
  report(6, "slot replacement", with_runs([&] { return slot_replacement(fx, runs.front().state); }));
  report(7, "mask/causality", with_runs([&] { return mask_causality(fx, runs.front().state); }));
  report(8, "HM formula", [] { return hm_formula(); });
  report(9, "learnability", with_runs([&] { return learnability(runs, learn_seconds); }));
  report(10, "regularization pull", [&] { return regularization_pull(fx); });
  report(11, "protocol integrity", [&] { return protocol_integrity(fx); });
  report(12, "reproducibility", [&] { return reproducibility(fx); });

  std::printf("# %d/%d criteria passed in %.1f s\n", ran - failed, ran, seconds_since(t_all));
  return failed == 0 ? 0 : 1;
}
