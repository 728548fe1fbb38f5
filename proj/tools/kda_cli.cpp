// kda: train, attack and evaluate keyed-diversification ensembles.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "kda/attacks.hpp"
#include "kda/experiment.hpp"
#include "kda/parallel.hpp"
#include "kda/pipeline.hpp"

namespace fs = std::filesystem;
using namespace kda;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kFailure = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Spec keys as flags of the same name, layered over an optional --config file.
struct SpecFlags {
  std::string config;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "key=value file; flags override its entries")->check(CLI::ExistingFile);
    static const std::map<std::string, std::string> help{
        {"dataset", "toy or cifar10"},
        {"data-dir", "CIFAR-10 binary directory (default: $KDA_DATA_DIR)"},
        {"train-n", "training records"},
        {"test-n", "test records"},
        {"attack-n", "attacked test images (taken from the start of the test split)"},
        {"channels", "J*I: 1, 3, 6 or 9 (experiment accepts a comma list)"},
        {"attack", "none, cw-l2 or one-pixel"},
        {"pixels", "OnePixel p: 1, 3 or 5"},
        {"population", "DE population"},
        {"generations", "DE generations"},
        {"cw-steps", "C&W binary search steps"},
        {"cw-iterations", "C&W iterations per step"},
        {"cw-target", "vanilla (transfer) or surrogate (attack a surrogate-keyed KDA)"},
        {"key", "master key file (32 bytes)"},
        {"seed", "seed for data, training and attacks"},
        {"epochs", "training epochs"},
        {"prefilter", "true or false"},
        {"tau", "pre-filter threshold"},
        {"flip-fraction", "share of sub-band coefficients with a keyed sign"},
        {"workers", "threads (0 = all cores)"},
        {"out", "output path"},
        {"models-dir", "cache trained models here and reuse them"},
    };
    for (const auto& key : experiment_keys()) {
      options[key] = app->add_option("--" + key, values[key], help.at(key));
    }
  }

  bool given(const std::string& key) const { return options.at(key)->count() > 0; }

  KeyValueFile merged() const {
    KeyValueFile kv = config.empty() ? KeyValueFile{} : KeyValueFile::load(config);
    for (const auto& [key, opt] : options) {
      if (opt->count()) kv.set(key, values.at(key));
    }
    if (!kv.contains("data-dir")) {
      if (const char* env = std::getenv("KDA_DATA_DIR")) kv.set("data-dir", env);
    }
    return kv;
  }

  ExperimentSpec spec() const { return ExperimentSpec::from_config(merged()); }
};

SecretKey load_master(const ExperimentSpec& spec) {
  if (spec.key_path.empty()) throw UsageError("--key is required");
  if (!fs::exists(spec.key_path)) throw DataError("master key file not found: " + spec.key_path.string());
  try {
    return SecretKey::load(spec.key_path);
  } catch (const std::runtime_error& e) {
    throw DataError(e.what());
  }
}

void log(const std::string& msg) { std::cerr << "[kda] " << msg << "\n"; }

nn::TrainConfig train_config(const ExperimentSpec& spec) {
  nn::TrainConfig cfg;
  cfg.epochs = spec.epochs;
  cfg.seed = spec.seed;
  return cfg;
}

std::size_t single_channels(const SpecFlags& flags, const ExperimentSpec& spec) {
  if (!flags.merged().contains("channels")) return 9;
  if (spec.channels.size() != 1) throw UsageError("--channels takes one of 1, 3, 6, 9 here");
  return spec.channels.front();
}

// A vanilla checkpoint file or a KDA bundle directory.
struct LoadedModel {
  std::optional<nn::Classifier> vanilla;
  std::optional<KdaModel> kda;

  std::vector<int> labels(std::span<const ImageTensor> images) const {
    if (vanilla) return nn::predict_labels(*vanilla, stack(images));
    std::vector<int> out;
    for (std::size_t s = 0; s < images.size(); s += 128) {
      const auto chunk = images.subspan(s, std::min<std::size_t>(128, images.size() - s));
      const Tensor p = predict_probabilities(*kda, chunk);
      const std::size_t k = p.dim(1);
      for (std::size_t r = 0; r < chunk.size(); ++r) {
        const double* row = p.data() + r * k;
        out.push_back(static_cast<int>(std::max_element(row, row + k) - row));
      }
    }
    return out;
  }
};

LoadedModel load_model(const fs::path& path, const ExperimentSpec& spec) {
  LoadedModel m;
  if (!fs::exists(path)) throw DataError("model not found: " + path.string());
  const SecretKey master = fs::is_directory(path) ? load_master(spec) : SecretKey{};
  try {
    if (fs::is_directory(path)) {
      m.kda = load_bundle(path, master);
    } else {
      m.vanilla = nn::load_checkpoint(path);
    }
  } catch (const std::runtime_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return m;
}

int cmd_keygen(const SpecFlags& flags) {
  const auto kv = flags.merged();
  const fs::path out = kv.get("out").value_or("master.key");
  const SecretKey key = flags.given("seed") ? SecretKey::from_seed(std::stoull(flags.values.at("seed")))
                                            : SecretKey::generate();
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  key.save(out);
  fs::permissions(out, fs::perms::owner_read | fs::perms::owner_write, fs::perm_options::replace);
  std::cout << "wrote " << out.string() << "\nfingerprint " << key.fingerprint() << "\n";
  return kOk;
}

int cmd_toyset(const SpecFlags& flags) {
  ExperimentSpec spec = flags.spec();
  spec.dataset = "toy";
  const fs::path dir = flags.given("out") || flags.merged().contains("out") ? spec.out : fs::path("toyset");
  const DatasetPair d = load_experiment_data(spec);
  fs::create_directories(dir);
  auto dump = [](const Dataset& ds, const fs::path& file) {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto rec = encode_cifar_record(ds.images[i], ds.labels[i]);
      out.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
    }
  };
  dump(d.train, dir / "data_batch_1.bin");
  dump(d.test, dir / "test_batch.bin");
  std::cout << "wrote " << d.train.size() << " train and " << d.test.size()
            << " test records in CIFAR-10 binary layout to " << dir.string() << "\n";
  return kOk;
}

int cmd_train(const SpecFlags& flags, const std::string& kind) {
  ExperimentSpec spec = flags.spec();
  if (!flags.given("out") && !flags.merged().contains("out")) spec.out = kind == "vanilla" ? "vanilla.kdam" : "kda-bundle";
  const DatasetPair d = load_experiment_data(spec);
  const auto& shape = d.train.images.front().tensor().shape();
  if (kind == "vanilla") {
    log("training vanilla reference CNN on " + std::to_string(d.train.size()) + " images");
    auto model = nn::make_reference_cnn(shape[0], shape[1], shape[2], d.train.class_count,
                                        SecretKey::from_seed(spec.seed).derive("vanilla-init"));
    auto trained = nn::train(std::move(model), d.train.batch(), d.train.labels, train_config(spec)).model;
    nn::quantize_to_f32(trained);
    nn::save_checkpoint(trained, spec.out);
    std::cout << "test error " << 100.0 * (1.0 - nn::accuracy(trained, d.test.batch(), d.test.labels)) << "%\n";
  } else {
    const SecretKey master = load_master(spec);
    const auto [j, i] = channel_layout(single_channels(flags, spec));
    log("training " + std::to_string(j * i) + " KDA channels on " + std::to_string(d.train.size()) + " images");
    KdaModel m = train_kda(derive_channels(master, j, i, spec.flip_fraction), d.train, train_config(spec),
                           {spec.prefilter, spec.tau},
                           reference_factory(shape[0], shape[1], shape[2], d.train.class_count), master.fingerprint(),
                           spec.workers);
    save_bundle(m, spec.out);
    std::cout << "test error " << 100.0 * predict_batch(m, d.test.images, d.test.labels).error_rate << "%\n";
  }
  std::cout << "wrote " << spec.out.string() << "\n";
  return kOk;
}

int cmd_attack(const SpecFlags& flags, const fs::path& model_path) {
  ExperimentSpec spec = flags.spec();
  if (spec.attack == AttackKind::kNone) throw UsageError("--attack must be cw-l2 or one-pixel");
  if (!flags.given("out") && !flags.merged().contains("out")) spec.out = "adversarial.kdaa";
  const LoadedModel model = load_model(model_path, spec);
  if (spec.attack == AttackKind::kCwL2 && !model.vanilla) {
    throw UsageError("cw-l2 is a gray-box attack on the vanilla classifier; pass a .kdam checkpoint");
  }
  const DatasetPair d = load_experiment_data(spec);
  const Dataset victims = d.test.head(spec.attack_n);
  std::vector<AttackResult> results(victims.size());
  log("running " + to_string(spec.attack) + " on " + std::to_string(victims.size()) + " images");
  parallel_for(victims.size(), spec.workers, [&](std::size_t n) {
    if (spec.attack == AttackKind::kCwL2) {
      CwConfig cfg;
      cfg.binary_search_steps = spec.cw_steps;
      cfg.max_iterations = spec.cw_iterations;
      results[n] = cw_l2(ClassifierGradientModel(*model.vanilla), victims.images[n], victims.labels[n], cfg);
    } else {
      BlackBox box = model.vanilla ? black_box(*model.vanilla) : black_box(*model.kda);
      OnePixelConfig cfg;
      cfg.pixels = spec.pixels;
      cfg.population = spec.population;
      cfg.generations = spec.generations;
      cfg.seed = attack_seed(spec.seed, n);
      results[n] = one_pixel(box, victims.images[n], victims.labels[n], cfg);
    }
  });
  std::vector<AdversarialRecord> recs;
  std::size_t ok = 0;
  for (std::size_t n = 0; n < results.size(); ++n) {
    ok += results[n].success;
    recs.push_back({static_cast<std::uint32_t>(n), results[n].success, static_cast<float>(results[n].norm),
                    results[n].adversarial});
  }
  write_adversarial_set(spec.out, recs);
  std::cout << "success " << ok << "/" << results.size() << "\nwrote " << spec.out.string() << "\n";
  return kOk;
}

int cmd_evaluate(const SpecFlags& flags, const fs::path& model_path, const std::string& adv_path) {
  const ExperimentSpec spec = flags.spec();
  const LoadedModel model = load_model(model_path, spec);
  const DatasetPair d = load_experiment_data(spec);
  std::vector<ImageTensor> images;
  std::vector<int> truth;
  if (adv_path.empty()) {
    images = d.test.images;
    truth = d.test.labels;
  } else {
    if (!fs::exists(adv_path)) throw DataError("adversarial set not found: " + adv_path);
    for (auto& r : read_adversarial_set(fs::path(adv_path))) {
      if (r.index >= d.test.size()) throw DataError("adversarial record index outside the test split");
      images.push_back(std::move(r.image));
      truth.push_back(d.test.labels[r.index]);
    }
  }
  if (images.empty()) throw DataError("nothing to evaluate");
  const auto pred = model.labels(images);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != truth[i];
  std::cout << "error " << 100.0 * static_cast<double>(wrong) / static_cast<double>(pred.size()) << "% over "
            << pred.size() << " images\n";
  return kOk;
}

int cmd_experiment(const SpecFlags& flags) {
  const ExperimentSpec spec = flags.spec();
  spec.validate();
  const auto result = run_experiment(spec, log);
  write_results(spec, result);
  write_table(std::cout, result);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Keyed diversification defense: train, attack and evaluate"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand help for every subcommand");

  std::map<std::string, SpecFlags> flags;
  auto sub = [&](const std::string& name, const std::string& desc) {
    CLI::App* s = app.add_subcommand(name, desc);
    flags[name].attach(s);
    return s;
  };
  sub("keygen", "Write a fresh 32-byte master key (deterministic with --seed)");
  sub("toyset", "Write the synthetic dataset in CIFAR-10 binary layout");
  std::string train_kind = "kda";
  sub("train", "Train a vanilla checkpoint or a KDA bundle")
      ->add_option("--model-kind", train_kind, "vanilla or kda")
      ->check(CLI::IsMember({"vanilla", "kda"}));
  std::string attack_model;
  sub("attack", "Craft an adversarial set against a checkpoint or bundle")
      ->add_option("--model", attack_model, "vanilla .kdam checkpoint or KDA bundle directory")
      ->required();
  std::string eval_model, eval_adv;
  CLI::App* ev = sub("evaluate", "Error rate of a model on the clean test split or an adversarial set");
  ev->add_option("--model", eval_model, "vanilla .kdam checkpoint or KDA bundle directory")->required();
  ev->add_option("--adv", eval_adv, "KDAA adversarial set (default: clean test split)");
  sub("experiment", "Run a whole spec and write the results CSV and table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    const SpecFlags& f = flags.at(name);
    if (name == "keygen") return cmd_keygen(f);
    if (name == "toyset") return cmd_toyset(f);
    if (name == "train") return cmd_train(f, train_kind);
    if (name == "attack") return cmd_attack(f, attack_model);
    if (name == "evaluate") return cmd_evaluate(f, eval_model, eval_adv);
    return cmd_experiment(f);
  } catch (const SpecError& e) {
    std::cerr << "kda: " << e.what() << "\n";
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "kda: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "kda: data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "kda: " << name << " failed: " << e.what() << "\n";
    return kFailure;
  }
}
