#include "kda/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "kda/attacks.hpp"
#include "kda/parallel.hpp"
#include "kda/pipeline.hpp"

namespace kda {

namespace {

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string shortest(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

SpecError::SpecError(const std::vector<std::string>& problems)
    : std::invalid_argument("invalid experiment spec: " + join(problems, "; ")), problems_(problems) {}

std::string to_string(AttackKind a) {
  switch (a) {
    case AttackKind::kNone: return "none";
    case AttackKind::kCwL2: return "cw-l2";
    case AttackKind::kOnePixel: return "one-pixel";
  }
  return "none";
}

AttackKind parse_attack(const std::string& s) {
  if (s == "none") return AttackKind::kNone;
  if (s == "cw-l2") return AttackKind::kCwL2;
  if (s == "one-pixel") return AttackKind::kOnePixel;
  throw std::invalid_argument("attack must be none, cw-l2 or one-pixel (got '" + s + "')");
}

const std::vector<std::string>& experiment_keys() {
  static const std::vector<std::string> keys{
      "dataset", "data-dir",   "train-n",  "test-n",      "attack-n",    "channels",  "attack",
      "pixels",  "population", "generations", "cw-steps", "cw-iterations", "cw-target", "key",
      "seed",    "epochs",     "prefilter", "tau",        "flip-fraction", "workers",  "out",
      "models-dir"};
  return keys;
}

KeyValueFile ExperimentSpec::to_config() const {
  KeyValueFile kv;
  std::vector<std::string> ch;
  for (auto c : channels) ch.push_back(std::to_string(c));
  kv.set("dataset", dataset);
  kv.set("data-dir", data_dir.string());
  kv.set("train-n", std::to_string(train_n));
  kv.set("test-n", std::to_string(test_n));
  kv.set("attack-n", std::to_string(attack_n));
  kv.set("channels", join(ch, ","));
  kv.set("attack", to_string(attack));
  kv.set("pixels", std::to_string(pixels));
  kv.set("population", std::to_string(population));
  kv.set("generations", std::to_string(generations));
  kv.set("cw-steps", std::to_string(cw_steps));
  kv.set("cw-iterations", std::to_string(cw_iterations));
  kv.set("cw-target", cw_target);
  kv.set("key", key_path.string());
  kv.set("seed", std::to_string(seed));
  kv.set("epochs", std::to_string(epochs));
  kv.set("prefilter", prefilter ? "true" : "false");
  kv.set("tau", shortest(tau));
  kv.set("flip-fraction", shortest(flip_fraction));
  kv.set("workers", std::to_string(workers));
  kv.set("out", out.string());
  kv.set("models-dir", models_dir.string());
  return kv;
}

ExperimentSpec ExperimentSpec::from_config(const KeyValueFile& kv) {
  ExperimentSpec s;
  std::vector<std::string> problems;
  const auto& known = experiment_keys();
  for (const auto& k : kv.keys()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) problems.push_back("unknown key '" + k + "'");
  }

  auto count = [&](const std::string& key, std::size_t& field) {
    const auto v = kv.get(key);
    if (!v) return;
    std::size_t pos = 0;
    try {
      if (!v->empty() && (*v)[0] == '-') throw std::invalid_argument("negative");
      const unsigned long long n = std::stoull(*v, &pos);
      if (pos != v->size()) throw std::invalid_argument("trailing");
      field = static_cast<std::size_t>(n);
    } catch (const std::exception&) {
      problems.push_back(key + " must be a non-negative integer (got '" + *v + "')");
    }
  };
  auto real = [&](const std::string& key, double& field) {
    const auto v = kv.get(key);
    if (!v) return;
    std::size_t pos = 0;
    try {
      field = std::stod(*v, &pos);
      if (pos != v->size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      problems.push_back(key + " must be a number (got '" + *v + "')");
    }
  };

  if (auto v = kv.get("dataset")) s.dataset = *v;
  if (auto v = kv.get("data-dir")) s.data_dir = *v;
  count("train-n", s.train_n);
  count("test-n", s.test_n);
  count("attack-n", s.attack_n);
  if (auto v = kv.get("channels")) {
    s.channels.clear();
    std::stringstream ss(*v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        std::size_t pos = 0;
        const auto n = std::stoul(item, &pos);
        if (pos != item.size()) throw std::invalid_argument("trailing");
        s.channels.push_back(n);
      } catch (const std::exception&) {
        problems.push_back("channels must be a comma-separated list of 1, 3, 6, 9 (got '" + *v + "')");
        break;
      }
    }
  }
  if (auto v = kv.get("attack")) {
    try {
      s.attack = parse_attack(*v);
    } catch (const std::invalid_argument& e) {
      problems.push_back(e.what());
    }
  }
  count("pixels", s.pixels);
  count("population", s.population);
  count("generations", s.generations);
  count("cw-steps", s.cw_steps);
  count("cw-iterations", s.cw_iterations);
  if (auto v = kv.get("cw-target")) s.cw_target = *v;
  if (auto v = kv.get("key")) s.key_path = *v;
  {
    std::size_t n = s.seed;
    count("seed", n);
    s.seed = n;
  }
  count("epochs", s.epochs);
  if (auto v = kv.get("prefilter")) {
    if (*v == "true" || *v == "1" || *v == "on") {
      s.prefilter = true;
    } else if (*v == "false" || *v == "0" || *v == "off") {
      s.prefilter = false;
    } else {
      problems.push_back("prefilter must be true or false (got '" + *v + "')");
    }
  }
  real("tau", s.tau);
  real("flip-fraction", s.flip_fraction);
  count("workers", s.workers);
  if (auto v = kv.get("out")) s.out = *v;
  if (auto v = kv.get("models-dir")) s.models_dir = *v;

  if (!problems.empty()) throw SpecError(problems);
  return s;
}

void ExperimentSpec::validate() const {
  std::vector<std::string> p;
  if (dataset != "toy" && dataset != "cifar10") p.push_back("dataset must be toy or cifar10");
  if (dataset == "cifar10" && data_dir.empty()) p.push_back("cifar10 needs data-dir (or KDA_DATA_DIR)");
  if (train_n == 0) p.push_back("train-n must be >= 1");
  if (test_n == 0) p.push_back("test-n must be >= 1");
  if (dataset == "cifar10" && train_n > 50000) p.push_back("train-n exceeds the 50000 CIFAR-10 training records");
  if (dataset == "cifar10" && test_n > 10000) p.push_back("test-n exceeds the 10000 CIFAR-10 test records");
  if (attack != AttackKind::kNone && (attack_n == 0 || attack_n > test_n)) p.push_back("attack-n must be in [1, test-n]");
  if (channels.empty()) p.push_back("channels must list at least one configuration");
  for (auto c : channels) {
    if (c != 1 && c != 3 && c != 6 && c != 9) p.push_back("channels entries must be 1, 3, 6 or 9 (got " + std::to_string(c) + ")");
  }
  if (pixels != 1 && pixels != 3 && pixels != 5) p.push_back("pixels must be 1, 3 or 5");
  if (population < 4) p.push_back("population must be >= 4");
  if (cw_steps == 0 || cw_iterations == 0) p.push_back("cw-steps and cw-iterations must be >= 1");
  if (cw_target != "vanilla" && cw_target != "surrogate") p.push_back("cw-target must be vanilla or surrogate");
  if (key_path.empty()) p.push_back("key (master key file) is required");
  if (!(tau >= 0.0)) p.push_back("tau must be >= 0");
  if (!(flip_fraction >= 0.0 && flip_fraction <= 1.0)) p.push_back("flip-fraction must be in [0,1]");
  if (out.empty()) p.push_back("out must name the results CSV");
  if (!p.empty()) throw SpecError(p);
}

std::uint64_t attack_seed(std::uint64_t seed, std::size_t index) {
  const std::uint64_t idx[1] = {index};
  const auto k = SecretKey::from_seed(seed).derive("attack-image", idx).bytes();
  std::uint64_t v = 0;
  for (std::size_t b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(k[b]) << (8 * b);
  return v;
}

std::pair<std::size_t, std::size_t> channel_layout(std::size_t total) {
  switch (total) {
    case 1: return {1, 1};
    case 3: return {3, 1};
    case 6: return {3, 2};
    case 9: return {3, 3};
  }
  throw std::invalid_argument("J*I must be 1, 3, 6 or 9");
}

DatasetPair load_experiment_data(const ExperimentSpec& spec) {
  if (spec.dataset == "cifar10") return load_cifar10(spec.data_dir, spec.train_n, spec.test_n);
  DatasetPair d;
  d.train = make_toy_dataset(spec.seed, (spec.train_n + 9) / 10, Split::kTrain).head(spec.train_n);
  d.test = make_toy_dataset(spec.seed, (spec.test_n + 9) / 10, Split::kTest).head(spec.test_n);
  return d;
}

namespace {

struct Models {
  nn::Classifier vanilla;
  KdaModel kda;  // every channel the spec needs
};

std::string config_name(std::size_t total) { return std::to_string(total); }

KdaModel subset(const KdaModel& full, std::size_t total) {
  const auto [j, i] = channel_layout(total);
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < full.channels.size(); ++c) {
    const auto& cfg = full.channels[c].config;
    if (cfg.channel <= j && cfg.classifier <= i) keep.push_back(c);
  }
  return full.with_channels(keep);
}

std::pair<std::size_t, std::size_t> widest(const std::vector<std::size_t>& totals) {
  std::size_t j = 1, i = 1;
  for (auto t : totals) {
    const auto [tj, ti] = channel_layout(t);
    j = std::max(j, tj);
    i = std::max(i, ti);
  }
  return {j, i};
}

nn::TrainConfig train_config(const ExperimentSpec& spec) {
  nn::TrainConfig cfg;
  cfg.epochs = spec.epochs;
  cfg.seed = spec.seed;
  return cfg;
}

// Identifies a trained model: anything that changes the weights.
std::string training_tag(const ExperimentSpec& spec) {
  std::ostringstream os;
  os << spec.dataset << ":" << spec.train_n << ":" << spec.seed << ":" << spec.epochs << ":" << spec.prefilter << ":"
     << shortest(spec.tau) << ":" << shortest(spec.flip_fraction);
  return os.str();
}

nn::Classifier train_vanilla(const ExperimentSpec& spec, const Dataset& train, const Progress& progress) {
  const auto dir = spec.models_dir;
  const auto path = dir / "vanilla.kdam";
  const auto tag_path = dir / "vanilla.tag";
  if (!dir.empty() && std::filesystem::exists(path) && std::filesystem::exists(tag_path)) {
    std::ifstream in(tag_path);
    std::string tag;
    std::getline(in, tag);
    if (tag == training_tag(spec)) {
      if (progress) progress("loading vanilla model from " + path.string());
      return nn::load_checkpoint(path);
    }
  }
  if (progress) progress("training vanilla model");
  const auto& shape = train.images.front().tensor().shape();
  auto model = nn::make_reference_cnn(shape[0], shape[1], shape[2], train.class_count,
                                      SecretKey::from_seed(spec.seed).derive("vanilla-init"));
  auto trained = nn::train(std::move(model), train.batch(), train.labels, train_config(spec)).model;
  nn::quantize_to_f32(trained);
  if (!dir.empty()) {
    std::filesystem::create_directories(dir);
    nn::save_checkpoint(trained, path);
    std::ofstream(tag_path) << training_tag(spec) << "\n";
  }
  return trained;
}

KdaModel train_kda_models(const ExperimentSpec& spec, const SecretKey& master, const Dataset& train,
                          std::size_t j, std::size_t i, const std::string& name, const Progress& progress) {
  const auto dir = spec.models_dir.empty() ? std::filesystem::path{} : spec.models_dir / name;
  const PrefilterConfig pf{spec.prefilter, spec.tau};
  if (!dir.empty() && std::filesystem::exists(dir / "manifest.txt") && std::filesystem::exists(dir / "training.tag")) {
    std::ifstream in(dir / "training.tag");
    std::string tag;
    std::getline(in, tag);
    if (tag == training_tag(spec)) {
      try {
        KdaModel m = load_bundle(dir, master);
        std::size_t hj = 0, hi = 0;
        for (const auto& ch : m.channels) {
          hj = std::max(hj, ch.config.channel);
          hi = std::max(hi, ch.config.classifier);
        }
        if (hj >= j && hi >= i && m.channels.size() == hj * hi && m.prefilter == pf) {
          if (progress) progress("loading KDA bundle from " + dir.string());
          return m;
        }
      } catch (const std::exception&) {
        // Stale or foreign bundle: retrain below.
      }
    }
  }
  if (progress) progress("training " + std::to_string(j * i) + " KDA channels (" + name + ")");
  const auto& shape = train.images.front().tensor().shape();
  KdaModel m = train_kda(derive_channels(master, j, i, spec.flip_fraction), train, train_config(spec), pf,
                         reference_factory(shape[0], shape[1], shape[2], train.class_count), master.fingerprint(),
                         spec.workers);
  if (!dir.empty()) {
    save_bundle(m, dir);
    std::ofstream(dir / "training.tag") << training_tag(spec) << "\n";
  }
  return m;
}

std::vector<int> predict_vanilla(const nn::Classifier& model, std::span<const ImageTensor> images) {
  return nn::predict_labels(model, stack(images));
}

double error_percent(std::span<const int> predicted, std::span<const int> truth) {
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) wrong += predicted[i] != truth[i];
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(truth.size());
}

std::vector<AttackResult> run_cw(const GradientModel& target, const Dataset& data, const ExperimentSpec& spec) {
  CwConfig cfg;
  cfg.binary_search_steps = spec.cw_steps;
  cfg.max_iterations = spec.cw_iterations;
  std::vector<AttackResult> out(data.size());
  parallel_for(data.size(), spec.workers,
               [&](std::size_t n) { out[n] = cw_l2(target, data.images[n], data.labels[n], cfg); });
  return out;
}

std::vector<AttackResult> run_one_pixel(const BlackBox::Query& query, const Dataset& data, const ExperimentSpec& spec) {
  std::vector<AttackResult> out(data.size());
  parallel_for(data.size(), spec.workers, [&](std::size_t n) {
    BlackBox box(query);
    OnePixelConfig cfg;
    cfg.pixels = spec.pixels;
    cfg.population = spec.population;
    cfg.generations = spec.generations;
    cfg.seed = attack_seed(spec.seed, n);
    out[n] = one_pixel(box, data.images[n], data.labels[n], cfg);
  });
  return out;
}

std::pair<double, double> success_and_norm(const std::vector<AttackResult>& results) {
  std::size_t ok = 0;
  double norm = 0.0;
  for (const auto& r : results) {
    if (!r.success) continue;
    ++ok;
    norm += r.norm;
  }
  return {100.0 * static_cast<double>(ok) / static_cast<double>(results.size()),
          ok ? norm / static_cast<double>(ok) : 0.0};
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec, const Progress& progress) {
  spec.validate();
  if (!std::filesystem::exists(spec.key_path)) throw DataError("master key file not found: " + spec.key_path.string());
  const SecretKey master = SecretKey::load(spec.key_path);
  const DatasetPair data = load_experiment_data(spec);
  data.train.validate();
  data.test.validate();
  if (data.train.empty() || data.test.empty()) throw DataError("dataset is empty");

  std::vector<std::size_t> totals = spec.channels;
  std::sort(totals.begin(), totals.end());
  totals.erase(std::unique(totals.begin(), totals.end()), totals.end());
  const auto [j, i] = widest(totals);

  const nn::Classifier vanilla = train_vanilla(spec, data.train, progress);
  const KdaModel full = train_kda_models(spec, master, data.train, j, i, "kda", progress);
  std::vector<std::pair<std::string, KdaModel>> configs;
  for (auto t : totals) configs.emplace_back(config_name(t), subset(full, t));

  ExperimentResult result;
  auto row = [&](const std::string& attack, const std::string& config, double err, std::size_t n) {
    result.rows.push_back({attack, config, err, n, spec.seed});
  };

  if (progress) progress("clean evaluation on " + std::to_string(data.test.size()) + " test images");
  row("none", "vanilla", error_percent(predict_vanilla(vanilla, data.test.images), data.test.labels), data.test.size());
  for (const auto& [name, model] : configs) {
    row("none", name, 100.0 * predict_batch(model, data.test.images, data.test.labels).error_rate, data.test.size());
  }

  double change = 0.0;
  for (const auto& ch : full.channels) {
    for (const auto& img : data.test.head(20).images) change += mean_abs_change(img, ch.mask);
  }
  result.notes.emplace_back("mean |pixel change| of one sub-band flip",
                            fixed(change / static_cast<double>(full.channels.size() * data.test.head(20).size()), 5));

  if (spec.attack == AttackKind::kNone) return result;

  const Dataset victims = data.test.head(spec.attack_n);
  const std::string attack = to_string(spec.attack) + (spec.attack == AttackKind::kOnePixel
                                                           ? "-p" + std::to_string(spec.pixels)
                                                           : std::string{});
  if (spec.attack == AttackKind::kCwL2) {
    if (progress) progress("C&W L2 against vanilla on " + std::to_string(victims.size()) + " images");
    const auto adv = run_cw(ClassifierGradientModel(vanilla), victims, spec);
    const auto [rate, norm] = success_and_norm(adv);
    result.notes.emplace_back("cw-l2 success vs vanilla (%)", fixed(rate, 2));
    result.notes.emplace_back("cw-l2 mean L2 of successes", fixed(norm, 4));
    row(attack, "vanilla", 100.0 * evaluate_under_attack(vanilla, adv), victims.size());

    if (spec.cw_target == "vanilla") {
      for (const auto& [name, model] : configs) row(attack, name, 100.0 * evaluate_under_attack(model, adv), victims.size());
    } else {
      // Attacker trains their own keyed copy and differentiates through it.
      const SecretKey surrogate_key = SecretKey::from_seed(spec.seed).derive("surrogate-master");
      KdaModel surrogate = train_kda_models(spec, surrogate_key, data.train, j, i, "surrogate", progress);
      surrogate.prefilter.enabled = false;
      for (const auto& [name, model] : configs) {
        if (progress) progress("C&W L2 against surrogate " + name + "-channel KDA");
        const KdaModel sub = subset(surrogate, std::stoul(name));
        const auto sadv = run_cw(KdaGradientModel(sub), victims, spec);
        row(attack, name, 100.0 * evaluate_under_attack(model, sadv), victims.size());
      }
    }
  } else {
    if (progress) progress("OnePixel p=" + std::to_string(spec.pixels) + " against vanilla");
    const auto vq = [&](std::span<const ImageTensor> imgs) { return nn::softmax(vanilla.forward(stack(imgs))); };
    const auto adv = run_one_pixel(vq, victims, spec);
    result.notes.emplace_back("one-pixel success vs vanilla (%)", fixed(success_and_norm(adv).first, 2));
    row(attack, "vanilla", 100.0 * evaluate_under_attack(vanilla, adv), victims.size());
    for (const auto& [name, model] : configs) {
      if (progress) progress("OnePixel p=" + std::to_string(spec.pixels) + " against " + name + "-channel KDA");
      const KdaModel& m = model;
      const auto kq = [&m](std::span<const ImageTensor> imgs) { return predict_probabilities(m, imgs); };
      const auto kadv = run_one_pixel(kq, victims, spec);
      result.notes.emplace_back("one-pixel success vs KDA-" + name + " (%)", fixed(success_and_norm(kadv).first, 2));
      row(attack, name, 100.0 * evaluate_under_attack(model, kadv), victims.size());
    }
  }
  return result;
}

void write_csv(std::ostream& out, const std::vector<ResultRow>& rows) {
  out << "attack,config,error_percent,n,seed\n";
  for (const auto& r : rows) {
    out << r.attack << "," << r.config << "," << fixed(r.error_percent, 2) << "," << r.n << "," << r.seed << "\n";
  }
}

void write_table(std::ostream& out, const ExperimentResult& result) {
  std::vector<std::string> attacks, configs;
  std::map<std::pair<std::string, std::string>, std::string> cell;
  for (const auto& r : result.rows) {
    if (std::find(attacks.begin(), attacks.end(), r.attack) == attacks.end()) attacks.push_back(r.attack);
    if (std::find(configs.begin(), configs.end(), r.config) == configs.end()) configs.push_back(r.config);
    cell[{r.attack, r.config}] = fixed(r.error_percent, 2);
  }
  auto label = [](const std::string& a) { return a == "none" ? std::string("Original") : a; };
  auto heading = [](const std::string& c) { return c == "vanilla" ? std::string("Vanilla") : "KDA-" + c; };
  std::size_t w0 = std::string("Error (%)").size();
  for (const auto& a : attacks) w0 = std::max(w0, label(a).size());
  std::vector<std::size_t> w;
  for (const auto& c : configs) {
    std::size_t cw = heading(c).size();
    for (const auto& a : attacks) cw = std::max(cw, cell[{a, c}].size());
    w.push_back(cw);
  }
  auto pad_right = [](const std::string& s, std::size_t n) { return s + std::string(n - s.size(), ' '); };
  auto pad_left = [](const std::string& s, std::size_t n) { return std::string(n - s.size(), ' ') + s; };

  out << pad_right("Error (%)", w0);
  for (std::size_t c = 0; c < configs.size(); ++c) out << "  " << pad_left(heading(configs[c]), w[c]);
  out << "\n";
  std::size_t total = w0;
  for (auto x : w) total += 2 + x;
  out << std::string(total, '-') << "\n";
  for (const auto& a : attacks) {
    out << pad_right(label(a), w0);
    for (std::size_t c = 0; c < configs.size(); ++c) {
      const auto it = cell.find({a, configs[c]});
      out << "  " << pad_left(it == cell.end() ? "-" : it->second, w[c]);
    }
    out << "\n";
  }
  if (!result.notes.empty()) out << "\n";
  for (const auto& [k, v] : result.notes) out << k << ": " << v << "\n";
}

void write_results(const ExperimentSpec& spec, const ExperimentResult& result) {
  if (spec.out.has_parent_path()) std::filesystem::create_directories(spec.out.parent_path());
  std::ofstream csv(spec.out, std::ios::binary | std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write " + spec.out.string());
  write_csv(csv, result.rows);
  auto table_path = spec.out;
  table_path.replace_extension(spec.out.extension() == ".txt" ? ".table.txt" : ".txt");
  std::ofstream table(table_path, std::ios::binary | std::ios::trunc);
  if (!table) throw std::runtime_error("cannot write " + table_path.string());
  write_table(table, result);
}

}  // namespace kda
