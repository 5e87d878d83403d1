#include "app.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "knnmem/error.hpp"
#include "run_config.hpp"

namespace knnmem::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ------------------------------------------------------------ options

/// Raw command-line values for every schema key, applied only when given.
struct KeyOptions {
  std::map<std::string, std::string> text;
  std::map<std::string, bool> flags;
  std::map<std::string, CLI::Option*> options;
  std::string config_file;

  void attach(CLI::App& app) {
    app.add_option("--config", config_file, "JSON file with configuration keys");
    for (const ConfigKey& k : config_schema()) {
      std::string flag = "--" + k.name;
      std::replace(flag.begin(), flag.end(), '_', '-');
      if (k.type == KeyType::boolean) {
        const std::string negated = "!--no-" + flag.substr(2);
        options[k.name] = app.add_flag(flag + "," + negated, flags[k.name], k.help + " [default: " +
                                                                                 k.default_value.dump() + "]");
      } else {
        std::string shown = k.default_value.dump();
        if (k.type == KeyType::integer_list) {
          shown.clear();
          for (const auto& v : k.default_value) shown += (shown.empty() ? "" : ",") + v.dump();
        }
        static const std::map<KeyType, std::string> kTypeNames = {{KeyType::integer, "UINT"},
                                                                  {KeyType::real, "FLOAT"},
                                                                  {KeyType::text, "TEXT"},
                                                                  {KeyType::integer_list, "UINT,..."}};
        options[k.name] = app.add_option(flag, text[k.name], k.help)->default_str(shown)->type_name(kTypeNames.at(k.type))
                              ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
      }
    }
  }

  json patch() const {
    json out = json::object();
    for (const ConfigKey& k : config_schema()) {
      if (options.at(k.name)->count() == 0) continue;
      const std::string& raw = k.type == KeyType::boolean ? std::string() : text.at(k.name);
      try {
        switch (k.type) {
          case KeyType::boolean: out[k.name] = flags.at(k.name); break;
          case KeyType::text: out[k.name] = raw; break;
          case KeyType::real: out[k.name] = std::stod(raw); break;
          case KeyType::integer: out[k.name] = parse_count(raw); break;
          case KeyType::integer_list: {
            json list = json::array();
            std::stringstream ss(raw);
            for (std::string part; std::getline(ss, part, ',');) list.push_back(parse_count(part));
            out[k.name] = list;
            break;
          }
        }
      } catch (const std::exception&) {
        throw ConfigError("--" + k.name + ": cannot parse '" + raw + "'");
      }
    }
    return out;
  }

  static std::uint64_t parse_count(const std::string& s) {
    std::size_t used = 0;
    if (s.empty() || s[0] == '-') throw std::invalid_argument(s);
    const auto v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  }
};

std::string absolute_or_empty(const std::string& p) { return p.empty() ? p : fs::absolute(p).lexically_normal().string(); }

/// base <- config file <- flags, with data paths made absolute so artifacts
/// can be reused from another directory.
RunConfig effective_config(json base, const KeyOptions& opts) {
  if (!opts.config_file.empty()) merge_config(base, load_config_file(opts.config_file), opts.config_file);
  merge_config(base, opts.patch(), "command line");
  RunConfig c = RunConfig::from_json(base);
  for (std::string* p : {&c.train, &c.dev, &c.classes, &c.external, &c.external_classes, &c.trainer.embeddings_path}) {
    *p = absolute_or_empty(*p);
  }
  return c;
}

/// Writes through a temporary file so a failed command leaves no partial artifact.
void write_file(const fs::path& path, const std::function<void(std::ostream&)>& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    body(out);
    out.flush();
    if (!out) throw DataError("failed writing " + path.string());
  }
  fs::rename(tmp, path);
}

// --------------------------------------------------------------- data

LabelSpace resolve_labels(const std::string& names_file, std::size_t count, const std::string& data, const char* what) {
  if (!names_file.empty()) return LabelSpace::from_file(names_file);
  const fs::path sibling = fs::path(data).parent_path() / "classes.txt";
  if (fs::exists(sibling)) return LabelSpace::from_file(sibling);
  if (count >= 2) return LabelSpace::numbered(count);
  throw ConfigError(std::string("cannot tell the class count of ") + what +
                    ": give a class names file or a class count");
}

struct Prepared {
  LabelSpace labels;
  Corpus train;
  Corpus dev;
  std::optional<LabelSpace> external_labels;
  Corpus external;

  ExperimentData experiment() const {
    return ExperimentData{&train, &dev, labels.size(), external_labels ? &external : nullptr,
                          external_labels ? external_labels->size() : 0};
  }
  const Corpus& neighbor_source() const { return external_labels ? external : train; }
  std::size_t neighbor_classes() const { return external_labels ? external_labels->size() : labels.size(); }
};

Prepared prepare(const RunConfig& c) {
  if (c.train.empty()) throw ConfigError("no training data: set train");
  Prepared p{resolve_labels(c.classes, c.num_classes, c.train, "train"), {}, {}, std::nullopt, {}};
  Corpus all = load_dataset(c.train, p.labels);
  if (c.dev.empty()) {
    std::tie(p.train, p.dev) =
        split_dev(all, p.labels.size(), SplitSpec{c.dev_per_class, c.trainer.seed});
  } else {
    p.train = std::move(all);
    p.dev = load_dataset(c.dev, p.labels);
  }
  if (!c.external.empty()) {
    p.external_labels = resolve_labels(c.external_classes, c.external_num_classes, c.external, "external");
    p.external = load_dataset(c.external, *p.external_labels);
  }
  return p;
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

// ----------------------------------------------------------- commands

int cmd_index(const RunConfig& c, std::ostream& out) {
  const Prepared p = prepare(c);
  const InvertedIndex index = build_index(p.neighbor_source());
  const bool own = !p.external_labels;
  const NeighborCache train_nb =
      precompute_neighbors(index, p.train, c.trainer.k, own && c.trainer.self_exclude, c.trainer.bm25, c.trainer.threads);
  const NeighborCache dev_nb = precompute_neighbors(index, p.dev, c.trainer.k, false, c.trainer.bm25, c.trainer.threads);
  const fs::path dir = c.out_dir;
  write_file(dir / "config.json", [&](std::ostream& o) { o << c.to_json().dump(2) << '\n'; });
  write_file(dir / "index.knnidx", [&](std::ostream& o) { save_index(index, o); });
  write_file(dir / "train.neighbors", [&](std::ostream& o) { write_neighbor_cache(train_nb, o); });
  write_file(dir / "dev.neighbors", [&](std::ostream& o) { write_neighbor_cache(dev_nb, o); });
  out << "docs " << index.doc_count() << "\nterms " << index.term_count() << "\navgdl "
      << fixed(index.avg_doc_len(), 4) << '\n';
  return kOk;
}

EpochCallback progress(std::ostream& out) {
  return [&out](const EpochMetrics& m) {
    out << "epoch " << m.epoch << " loss " << fixed(m.train_loss, 6) << " dev " << fixed(m.dev_accuracy, 4) << '\n';
  };
}

Checkpoint with_config(Checkpoint ckpt, const RunConfig& c) {
  ckpt.run_config = c.to_json().dump();
  return ckpt;
}

int cmd_train(const RunConfig& c, std::ostream& out) {
  const Prepared p = prepare(c);
  const fs::path dir = c.out_dir;
  write_file(dir / "config.json", [&](std::ostream& o) { o << c.to_json().dump(2) << '\n'; });
  if (c.setup.empty()) {
    ExperimentResult r = run_experiment(p.experiment(), c.trainer, progress(out));
    write_file(dir / "metrics.jsonl", [&](std::ostream& o) {
      for (const auto& m : r.training.history) write_epoch_metrics(m, o);
      write_summary(r.training, o);
    });
    write_file(dir / "model.ckpt", [&](std::ostream& o) { save_checkpoint(with_config(r.training.best, c), o); });
    out << "best epoch " << r.training.best.epoch << " dev " << fixed(r.training.best.dev_accuracy, 4) << '\n';
    return kOk;
  }

  SetupOptions options{c.low_resource_fraction, c.unbalanced_counts};
  SetupReport report = run_setup(parse_setup(c.setup), p.experiment(), c.trainer, options, progress(out));
  std::ostringstream table;
  table << "model\tpreset\tclass_sizes\tlabel_block_width\tbest_epoch\tdev_accuracy\n";
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const SetupRow& row = report.rows[i];
    std::string sizes;
    for (auto n : row.class_sizes) sizes += (sizes.empty() ? "" : ",") + std::to_string(n);
    table << row.model << '\t' << row.preset << '\t' << sizes << '\t' << row.label_block_width << '\t'
          << row.best_epoch << '\t' << fixed(row.dev_accuracy, 4) << '\n';
    const std::string name = c.setup + "-" + std::to_string(i) + "-" + row.preset + ".ckpt";
    write_file(dir / name, [&](std::ostream& o) { save_checkpoint(with_config(report.checkpoints[i], c), o); });
  }
  write_file(dir / (c.setup + ".tsv"), [&](std::ostream& o) { o << "# config " << c.to_json().dump() << '\n' << table.str(); });
  out << table.str();
  return kOk;
}

/// Checkpoint, the data it was trained on, and a retrieval index over its neighbor source.
struct Loaded {
  Checkpoint ckpt;
  RunConfig config;
  Prepared data;
  InvertedIndex index;
};

Loaded load_for_inference(const std::string& path, const KeyOptions& opts) {
  if (path.empty()) throw ConfigError("--checkpoint is required");
  Checkpoint ckpt = load_checkpoint(fs::path(path));
  json base = RunConfig::defaults();
  if (!ckpt.run_config.empty()) merge_config(base, json::parse(ckpt.run_config), "checkpoint");
  RunConfig c = effective_config(base, opts);
  Prepared p = prepare(c);
  check_vocabulary(ckpt, experiment_vocabulary(p.experiment(), c.trainer.min_count));
  if (ckpt.model.config().num_classes != p.labels.size()) {
    throw DataError("num_classes mismatch: checkpoint has " + std::to_string(ckpt.model.config().num_classes) +
                    ", data has " + std::to_string(p.labels.size()));
  }
  InvertedIndex index = build_index(p.neighbor_source());
  return Loaded{std::move(ckpt), std::move(c), std::move(p), std::move(index)};
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& provenance,
             const KeyOptions& opts, std::ostream& out) {
  Loaded l = load_for_inference(checkpoint, opts);
  const Corpus docs = data.empty() ? l.data.dev : load_dataset(absolute_or_empty(data), l.data.labels);
  const NeighborCache nb = precompute_neighbors(l.index, docs, l.config.trainer.k, false, l.config.trainer.bm25,
                                                l.config.trainer.threads);
  DocumentStore store(&l.data.neighbor_source(), l.data.neighbor_classes());
  const bool memory = l.ckpt.model.config().features.uses_memory();
  std::ostringstream dump;
  const EvalReport report = evaluate(l.ckpt.model, SplitView{&docs, memory ? &nb : nullptr}, store,
                                     l.config.trainer.threads, provenance.empty() ? nullptr : &dump);
  const json j = {{"accuracy", report.accuracy},
                  {"total", report.total},
                  {"per_class_accuracy", report.per_class_accuracy},
                  {"confusion", report.confusion},
                  {"classes", l.data.labels.names()},
                  {"checkpoint", absolute_or_empty(checkpoint)},
                  {"config", l.config.to_json()}};
  write_file(fs::path(l.config.out_dir) / "eval.json", [&](std::ostream& o) { o << j.dump(2) << '\n'; });
  if (!provenance.empty()) write_file(provenance, [&](std::ostream& o) { o << dump.str(); });

  out << "accuracy " << fixed(report.accuracy, 4) << '\n' << "confusion (rows gold, columns predicted)\n";
  for (const auto& row : report.confusion) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "\t" : "") << row[i];
    out << '\n';
  }
  return kOk;
}

int cmd_predict(const std::string& checkpoint, const std::vector<std::string>& texts_in, const std::string& input,
                bool provenance, const KeyOptions& opts, std::ostream& out) {
  std::vector<std::string> texts = texts_in;
  if (!input.empty()) {
    std::ifstream in(input);
    if (!in) throw DataError("cannot open " + input);
    for (std::string line; std::getline(in, line);) texts.push_back(line);
  }
  if (texts.empty()) throw ConfigError("give --text or --input");
  Corpus docs;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    Document d;
    d.id = static_cast<DocId>(i);
    d.body = texts[i];
    d.tokens = tokenize(texts[i]);
    if (d.tokens.empty()) throw DataError("input " + std::to_string(i + 1) + " has no tokens");
    docs.push_back(std::move(d));
  }
  Loaded l = load_for_inference(checkpoint, opts);
  DocumentStore store(&l.data.neighbor_source(), l.data.neighbor_classes());
  const bool memory = l.ckpt.model.config().features.uses_memory();
  for (const Document& d : docs) {
    const NeighborSet nb = memory ? search_knn(l.index, d, l.config.trainer.k, std::nullopt, l.config.trainer.bm25)
                                  : NeighborSet{};
    ProvenanceRecord r = explain(l.ckpt.model, d, nb, store);
    r.gold.reset();
    out << l.data.labels.name(r.predicted) << '\n';
    if (provenance) write_provenance(r, out);
  }
  return kOk;
}

int cmd_sweep(const RunConfig& c, const std::string& axis, std::size_t max, std::ostream& out) {
  if (axis != "K" && axis != "I" && axis != "preset") throw ConfigError("--axis must be K, I or preset");
  const Prepared p = prepare(c);
  std::ostringstream table;
  table << axis << "\tpreset\tk\tperspectives\tbest_epoch\tdev_accuracy\n";
  out << table.str();
  const std::size_t rows = axis == "preset" ? 7 : max + 1;
  for (std::size_t v = 0; v < rows; ++v) {
    TrainConfig t = c.trainer;
    std::string label = std::to_string(v);
    if (axis == "K") {
      t.k = v;
      if (v == 0) t.preset = "M1";  // no neighbors: the plain BiLSTM
    } else if (axis == "I") {
      t.perspectives = v;  // 0: single unweighted cosine
    } else {
      t.preset = "M" + std::to_string(v + 1);
      label = t.preset;
    }
    const ExperimentResult r = run_experiment(p.experiment(), t);
    std::ostringstream line;
    line << label << '\t' << t.preset << '\t' << t.k << '\t' << t.perspectives << '\t' << r.training.best.epoch << '\t'
         << fixed(r.training.best.dev_accuracy, 4) << '\n';
    table << line.str();
    out << line.str() << std::flush;
  }
  write_file(fs::path(c.out_dir) / ("sweep-" + axis + ".tsv"),
             [&](std::ostream& o) { o << "# config " << c.to_json().dump() << '\n' << table.str(); });
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"kNN-memory text classification: BM25 neighbors, BiLSTM encoder, attention memory"};
  app.require_subcommand(1);

  KeyOptions index_opts, train_opts, eval_opts, predict_opts, sweep_opts;
  auto* index = app.add_subcommand("index", "build the BM25 index and neighbor caches");
  index_opts.attach(*index);
  auto* train = app.add_subcommand("train", "train a model (or every model of --setup)");
  train_opts.attach(*train);

  std::string checkpoint, data, provenance_path, input, axis;
  std::vector<std::string> texts;
  bool provenance = false;
  std::size_t max = 20;

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--data", data, "CSV to evaluate; default is the dev split");
  eval->add_option("--provenance", provenance_path, "write one JSON record per document here");
  eval_opts.attach(*eval);

  auto* predict = app.add_subcommand("predict", "label raw texts with a checkpoint");
  predict->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  predict->add_option("--text", texts, "text to classify (repeatable)");
  predict->add_option("--input", input, "file with one text per line");
  predict->add_flag("--provenance", provenance, "print the neighbor and attention record after each label");
  predict_opts.attach(*predict);

  auto* sweep = app.add_subcommand("sweep", "dev accuracy across K, I or feature presets");
  sweep->add_option("--axis", axis, "K, I or preset")->required();
  sweep->add_option("--max", max, "largest K or I")->capture_default_str();
  sweep_opts.attach(*sweep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*index) return cmd_index(effective_config(RunConfig::defaults(), index_opts), out);
    if (*train) return cmd_train(effective_config(RunConfig::defaults(), train_opts), out);
    if (*eval) return cmd_eval(checkpoint, data, provenance_path, eval_opts, out);
    if (*predict) return cmd_predict(checkpoint, texts, input, provenance, predict_opts, out);
    if (*sweep) return cmd_sweep(effective_config(RunConfig::defaults(), sweep_opts), axis, max, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kNumericError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kUsage;
}

}  // namespace knnmem::cli
