#include "mmrl/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mmrl/config.hpp"
#include "mmrl/errors.hpp"
#include "mmrl/serialization.hpp"

namespace mmrl {

namespace {

namespace fs = std::filesystem;

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitProtocol = 3;

std::string header_value(const std::vector<std::pair<std::string, std::string>>& header, const std::string& key) {
  for (const auto& [k, v] : header) {
    if (k == key) return v;
  }
  throw FormatError("adapter bundle has no '" + key + "' entry");
}

std::string join(const std::vector<std::size_t>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + std::to_string(items[i]);
  return out;
}

std::vector<std::size_t> split_indices(const std::string& text) {
  std::vector<std::size_t> out;
  std::istringstream in(text);
  for (std::string tok; std::getline(in, tok, ',');) {
    if (!tok.empty()) out.push_back(std::stoull(tok));
  }
  return out;
}

fs::path csv_mirror(const fs::path& json_path) {
  fs::path p = json_path;
  p.replace_extension(".csv");
  return p;
}

DualEncoder load_backbone(const RunConfig& cfg) {
  const fs::path ckpt = cfg.get("checkpoint");
  if (!fs::exists(ckpt)) throw ProtocolError("missing backbone checkpoint " + ckpt.string() + " (run pretrain first)");
  return DualEncoder::load(ckpt);
}

TaskCorpus load_corpus(const RunConfig& cfg) {
  const fs::path manifest = cfg.get("manifest");
  if (!fs::exists(manifest)) throw ProtocolError("missing corpus manifest " + manifest.string() + " (run gen first)");
  return load_manifest(manifest);
}

TaskCorpus corpus_from_config(const RunConfig& cfg) {
  return generate_corpus(cfg.get_int("classes"), cfg.get_int("items_per_class"), cfg.get_double("noise"),
                         cfg.get_u64("corpus_seed"), cfg.get_int("image_size"));
}

struct Context {
  RunConfig cfg;
  std::ostream& out;
};

void cmd_gen(Context& ctx) {
  const TaskCorpus corpus = corpus_from_config(ctx.cfg);
  save_manifest(corpus, ctx.cfg.get("manifest"), {{"config_hash", ctx.cfg.hash()}});
  ctx.out << "wrote " << corpus.items.size() << " items in " << corpus.num_classes << " classes to "
          << ctx.cfg.get("manifest") << "\n";
}

void cmd_pretrain(Context& ctx) {
  const TaskCorpus corpus = load_corpus(ctx.cfg);
  const PretrainConfig pc = ctx.cfg.pretrain();
  DualEncoder enc = DualEncoder::init(ctx.cfg.backbone(), pc.seed);
  const auto losses = pretrain_surrogate(corpus, enc, pc);
  std::vector<int> classes;
  for (int c = 0; c < corpus.num_classes; ++c) classes.push_back(c);
  const double zs = zero_shot_accuracy(corpus, corpus.indices(Split::test), classes, enc, pc.text_template);
  enc.save(ctx.cfg.get("checkpoint"), {{"config_hash", ctx.cfg.hash()}});
  char buf[160];
  std::snprintf(buf, sizeof(buf), "pretrained %d steps, final loss %.6f, zero-shot test accuracy %.2f%%\n",
                pc.steps, losses.empty() ? 0.0 : losses.back(), 100.0 * zs);
  ctx.out << buf << "backbone hash " << enc.content_hash() << "\n";
}

void cmd_train(Context& ctx) {
  const TaskCorpus corpus = load_corpus(ctx.cfg);
  const DualEncoder enc = load_backbone(ctx.cfg);
  const AblationCell cell = ctx.cfg.cell();
  const TrainConfig tc = ctx.cfg.train();
  const SplitSpec split = base_novel_split(corpus.num_classes, corpus.seed);
  const auto items = few_shot_sample(corpus, ctx.cfg.get_int("shots"), split, tc.seed);
  check_protocol(corpus, split, items);
  AdapterState state = init_representation_state(adapter_dims(enc, cell.tokens, cell.space_dim, cell.insert_layer),
                                                 enc, tc.seed, cell.variant);
  const TrainingSet data{&corpus, items, split.base};
  const TrainResult result = train(data, enc, state, tc);
  state.save(ctx.cfg.get("bundle"), {{"config_hash", ctx.cfg.hash()},
                                     {"backbone_hash", enc.content_hash()},
                                     {"split_seed", std::to_string(corpus.seed)},
                                     {"train_items", join(items)}});
  write_file_atomic(ctx.cfg.get("loss_csv"), loss_csv(result.trace, ctx.cfg.hash()));
  const auto means = epoch_mean_loss(result.trace);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "trained %d epochs (%zu steps), final epoch loss %.6f\n", result.epochs_run,
                result.trace.size(), means.empty() ? 0.0 : means.back());
  ctx.out << buf;
}

void cmd_eval(Context& ctx) {
  const fs::path bundle = ctx.cfg.get("bundle");
  if (!fs::exists(bundle)) throw ProtocolError("missing adapter bundle " + bundle.string());
  const TaskCorpus corpus = load_corpus(ctx.cfg);
  const DualEncoder enc = load_backbone(ctx.cfg);
  const auto header = AdapterState::load_header(bundle);
  if (header_value(header, "backbone_hash") != enc.content_hash()) {
    throw ProtocolError("adapter bundle was trained on a different backbone");
  }
  const AdapterState state = AdapterState::load(bundle);
  SplitSpec split = base_novel_split(corpus.num_classes, std::stoull(header_value(header, "split_seed")));
  const auto items = split_indices(header_value(header, "train_items"));
  EvalOptions opts{ctx.cfg.get_double("alpha"), ctx.cfg.get("template"), state.seed, ctx.cfg.hash()};
  const std::vector<EvalRecord> records{evaluate_base_to_novel(corpus, enc, state, split, items, opts)};
  const fs::path results = ctx.cfg.get("results");
  write_file_atomic(results, records_to_json(records));
  write_file_atomic(csv_mirror(results), records_to_csv(records));
  ctx.out << records_table(records);
}

std::vector<AblationCell> ablation_cells(const RunConfig& cfg) {
  const AblationCell base = cfg.cell();
  const std::string grid = cfg.get("grid");
  if (grid == "variants") return variant_grid(base);
  std::vector<double> values;
  const std::string& text = cfg.get("grid_values");
  if (text.empty()) {
    values = default_sweep_values(grid, cfg.get_int("layers"));
  } else {
    std::istringstream in(text);
    for (std::string tok; std::getline(in, tok, ',');) {
      try {
        values.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw ConfigError("grid_values expects comma-separated numbers");
      }
    }
  }
  return sweep_grid(base, grid, values);
}

void cmd_ablate(Context& ctx) {
  const TaskCorpus corpus = load_corpus(ctx.cfg);
  const DualEncoder enc = load_backbone(ctx.cfg);
  ExperimentSetup setup{&corpus, &enc, corpus.seed, ctx.cfg.get_int("shots"), ctx.cfg.train(), ctx.cfg.hash()};
  const auto cells = ablation_cells(ctx.cfg);
  const auto seeds = ctx.cfg.get_u64_list("seeds");
  const auto records = run_ablation(setup, cells, seeds);
  const fs::path results = ctx.cfg.get("results");
  write_file_atomic(results, records_to_json(records));
  write_file_atomic(csv_mirror(results), records_to_csv(records));
  ctx.out << records_table(aggregate_by_variant(records));
}

void cmd_gradcheck(Context& ctx) {
  const TaskCorpus corpus = fs::exists(ctx.cfg.get("manifest")) ? load_manifest(ctx.cfg.get("manifest"))
                                                               : corpus_from_config(ctx.cfg);
  DualEncoder enc = fs::exists(ctx.cfg.get("checkpoint"))
                        ? DualEncoder::load(ctx.cfg.get("checkpoint"))
                        : DualEncoder::init(ctx.cfg.backbone(), ctx.cfg.get_u64("backbone_seed"));
  const AblationCell cell = ctx.cfg.cell();
  const TrainConfig tc = ctx.cfg.train();
  const SplitSpec split = base_novel_split(corpus.num_classes, corpus.seed);
  const TrainingSet data{&corpus, few_shot_sample(corpus, ctx.cfg.get_int("shots"), split, tc.seed), split.base};
  AdapterState state = init_representation_state(adapter_dims(enc, cell.tokens, cell.space_dim, cell.insert_layer),
                                                 enc, tc.seed, cell.variant);
  ag::GradCheckOptions opts;
  opts.max_coordinates = static_cast<std::size_t>(ctx.cfg.get_int("gradcheck_coords"));
  opts.seed = tc.seed;
  const ag::GradCheckReport report =
      gradcheck_objective(data, enc, state, tc, static_cast<std::size_t>(ctx.cfg.get_int("gradcheck_batch")), opts);
  const double tolerance = ctx.cfg.get_double("gradcheck_tolerance");

  std::ostringstream text;
  char buf[256];
  text << "# config_hash=" << ctx.cfg.hash() << "\n";
  for (const auto& t : report.tensors) {
    std::snprintf(buf, sizeof(buf), "%-24s coords=%-6zu max_rel_err=%.3e\n", t.name.c_str(), t.coordinates,
                  t.max_rel_error);
    text << buf;
  }
  std::snprintf(buf, sizeof(buf), "max_rel_err=%.3e over %zu coordinates in %zu tensors (tolerance %.1e)\n",
                report.max_rel_error, report.coordinates, report.tensors.size(), tolerance);
  text << buf;
  if (!ctx.cfg.get("report").empty()) write_file_atomic(ctx.cfg.get("report"), text.str());
  ctx.out << text.str();
  if (!(report.max_rel_error < tolerance)) throw ContractError("gradient check exceeded the tolerance");
}

void cmd_report(Context& ctx) {
  const fs::path results = ctx.cfg.get("results");
  if (!fs::exists(results)) throw ProtocolError("missing results file " + results.string());
  const auto records = records_from_json(read_file(results));
  const auto table = aggregate_by_variant(records);
  const std::string text = records_table(table);
  const std::string& target = ctx.cfg.get("report");
  if (!target.empty()) {
    write_file_atomic(target, fs::path(target).extension() == ".csv" ? records_to_csv(table) : text);
  }
  ctx.out << text;
}

void append_log(const RunConfig& cfg, const std::string& command, int code) {
  const std::string& path = cfg.get("log");
  if (path.empty()) return;
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", &tm);
  std::ofstream log(path, std::ios::app);
  log << stamp << ' ' << command << " config_hash=" << cfg.hash() << " exit=" << code << '\n';
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-modal representation learning on a synthetic vision-language task"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  struct Command {
    const char* name;
    const char* help;
    void (*fn)(Context&);
  };
  const std::vector<Command> commands = {
      {"gen", "Generate the synthetic corpus and write its manifest", cmd_gen},
      {"pretrain", "Contrastively pretrain the surrogate backbone and write a checkpoint", cmd_pretrain},
      {"train", "Train an adapter on the base-class few-shot split", cmd_train},
      {"eval", "Base-to-novel evaluation of a trained adapter bundle", cmd_eval},
      {"ablate", "Train and evaluate a grid of variants or hyperparameters", cmd_ablate},
      {"gradcheck", "Compare analytic gradients with central finite differences", cmd_gradcheck},
      {"report", "Summarize a results file as a Base/Novel/HM table", cmd_report},
  };

  std::map<std::string, std::string> flag_values;
  std::string config_path;
  std::vector<std::pair<CLI::App*, std::vector<std::pair<std::string, CLI::Option*>>>> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    sub->add_option("--config", config_path, "Flat key=value config file");
    std::vector<std::pair<std::string, CLI::Option*>> opts;
    for (const auto& f : RunConfig::fields()) {
      std::string names = "--" + f.key;
      if (f.key.find('_') != std::string::npos) {
        std::string dashed = f.key;
        std::replace(dashed.begin(), dashed.end(), '_', '-');
        names += ",--" + dashed;
      }
      std::string help = f.help;
      if (!f.default_value.empty()) help += " [" + f.default_value + "]";
      opts.emplace_back(f.key, sub->add_option(names, flag_values[f.key], help));
    }
    subs.emplace_back(sub, std::move(opts));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  std::size_t chosen = 0;
  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (subs[i].first->parsed()) chosen = i;
  }
  const Command& command = commands[chosen];
  RunConfig cfg;
  // An explicit log path holds even when the rest of the config fails to load.
  for (const auto& [key, opt] : subs[chosen].second) {
    if (key == "log" && opt->count() > 0) cfg.set(key, flag_values[key]);
  }
  int code = 0;
  try {
    if (!config_path.empty()) cfg.load_file(config_path);
    cfg.apply_environment();
    for (const auto& [key, opt] : subs[chosen].second) {
      if (opt->count() > 0) cfg.set(key, flag_values[key]);
    }
    cfg.resolve();
    cfg.train();
    cfg.cell();
    err << "# resolved config (hash " << cfg.hash() << ")\n" << cfg.serialize();
    Context ctx{cfg, out};
    command.fn(ctx);
  } catch (const ConfigError& e) {
    err << e.what() << "\n";
    code = kExitUsage;
  } catch (const ProtocolError& e) {
    err << e.what() << "\n";
    code = kExitProtocol;
  } catch (const std::exception& e) {
    err << e.what() << "\n";
    code = kExitRuntime;
  }
  try {
    append_log(cfg, command.name, code);
  } catch (const std::exception&) {
  }
  return code;
}

}  // namespace mmrl
