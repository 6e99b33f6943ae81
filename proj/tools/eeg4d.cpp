// eeg4d: featurize raw EEG, generate synthetic sets, train/evaluate the
// 4D attention model, run attention ablations and render Grad-CAM++ maps.
//
// Exit codes: 0 ok, 1 usage, 2 bad input data, 3 internal failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "eeg4d/eeg4d.hpp"
#include "eeg4d/render.hpp"

namespace fs = std::filesystem;
using namespace eeg4d;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kInternal = 3 };

// Thrown for bad or inconsistent input files; maps to exit code 2.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainOptions {
  std::string data;
  std::string out = "run";
  std::string layout;
  std::string preset = "full";
  std::string features = "both";
  std::uint64_t seed = 1;
  int epochs = 150;
  int folds = 5;
  int jobs = 1;
  int batch = 12;
  double lr = 3e-4;
  bool no_spectral = false;
  bool no_spatial = false;
  bool no_temporal = false;
  bool ablate = false;
};

ElectrodeLayout resolve_layout(const std::string& path) {
  return path.empty() ? default_layout() : load_layout(path);
}

std::vector<Sample4D> load_samples(const std::string& path) {
  if (!fs::exists(path)) throw DataError("no such file or directory: " + path);
  auto samples = load_sample_path(path);
  if (samples.empty()) throw DataError("no samples in " + path);
  return samples;
}

FeatureMode parse_features(const std::string& s) {
  if (s == "both") return FeatureMode::both;
  if (s == "de") return FeatureMode::de_only;
  if (s == "psd") return FeatureMode::psd_only;
  throw CLI::ValidationError("--features", "expected both, de or psd");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

// A path ending in .e4da gets one container; anything else is a directory
// of single-sample files.
std::size_t write_output(const std::string& out, const std::vector<Sample4D>& samples, const std::string& stem) {
  if (fs::path(out).extension() == ".e4da") {
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    write_container(out, samples);
    return 1;
  }
  return write_sample_dir(out, samples, stem).size();
}

void add_train_options(CLI::App* cmd, TrainOptions& o) {
  cmd->add_option("--data", o.data, "Sample directory, file or container")->required();
  cmd->add_option("--out", o.out, "Output directory")->capture_default_str();
  cmd->add_option("--layout", o.layout, "Electrode layout file (default: built-in 62-channel map)");
  cmd->add_option("--preset", o.preset, "Model size: full, small or tiny")->capture_default_str();
  cmd->add_option("--features", o.features, "Feature slots: both, de or psd")->capture_default_str();
  cmd->add_option("--seed", o.seed, "Master seed")->capture_default_str();
  cmd->add_option("--epochs", o.epochs, "Epochs per fold")->capture_default_str()->check(CLI::NonNegativeNumber);
  cmd->add_option("--folds", o.folds, "Cross-validation folds")->capture_default_str()->check(CLI::Range(2, 1000));
  cmd->add_option("--jobs", o.jobs, "Folds trained in parallel")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--batch", o.batch, "Mini-batch size")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--lr", o.lr, "Adam learning rate")->capture_default_str()->check(CLI::PositiveNumber);
}

TrainConfig make_train_config(const TrainOptions& o, int spectral_depth, int slices, const ElectrodeLayout& layout) {
  TrainConfig cfg;
  cfg.seed = o.seed;
  cfg.max_epochs = o.epochs;
  cfg.folds = o.folds;
  cfg.jobs = o.jobs;
  cfg.batch_size = o.batch;
  cfg.adam.lr = o.lr;
  cfg.model = ModelConfig::preset(o.preset);
  cfg.model.grid_h = layout.grid_h;
  cfg.model.grid_w = layout.grid_w;
  cfg.model.spectral_depth = spectral_depth;
  cfg.model.slices = slices;
  cfg.model.flags = {!o.no_spectral, !o.no_spatial, !o.no_temporal};
  cfg.validate();
  cfg.model.validate();
  return cfg;
}

std::vector<Sample4D> prepare(const TrainOptions& o, const ElectrodeLayout& layout) {
  auto samples = feature_subset(load_samples(o.data), parse_features(o.features));
  for (const auto& s : samples)
    if (s.h != layout.grid_h || s.w != layout.grid_w || s.features != samples.front().features ||
        s.slices != samples.front().slices)
      throw DataError("samples do not share one shape matching the " + std::to_string(layout.grid_h) + "x" +
                      std::to_string(layout.grid_w) + " layout");
  return samples;
}

// Every option of the active subcommand, defaults included, in the same
// key=value form --config reads back.
void snapshot_config(const CLI::App& app, const std::string& sub, const fs::path& dir) {
  std::istringstream all(app.config_to_str(true, false));
  std::string text, line;
  while (std::getline(all, line))
    if (line.rfind(sub + ".", 0) == 0) text += line + "\n";
  write_text(dir / "resolved.cfg", text);
}

int run_train(const CLI::App& app, const std::string& sub, const TrainOptions& o) {
  const auto layout = resolve_layout(o.layout);
  const auto samples = prepare(o, layout);
  const auto cfg = make_train_config(o, samples.front().features, samples.front().slices, layout);
  const fs::path out(o.out);
  fs::create_directories(out);
  snapshot_config(app, sub, out);

  if (o.ablate) {
    const auto rows = ablation_sweep(samples, layout, cfg);
    write_text(out / "ablation.json", ablation_json(rows).dump(2) + "\n");
    write_text(out / "ablation.csv", ablation_table(rows));
    std::cout << ablation_table(rows);
    return kOk;
  }

  fs::create_directories(out / "models");
  fs::create_directories(out / "curves");
  const auto metrics = train_all(samples, layout, cfg, [&](int subj, int exp, const FoldResult& f, const Model<float>* m, const Normalizer& norm) {
    const std::string tag = "s" + std::to_string(subj) + "_e" + std::to_string(exp) + "_f" + std::to_string(f.fold);
    write_text(out / "curves" / (tag + ".csv"), curve_csv(f));
    if (m) save_model((out / "models" / (tag + ".e4dk")).string(), *m, &norm);
    std::cerr << "subject " << subj << " experiment " << exp << " fold " << f.fold << ": test acc " << f.test_acc
              << ", train acc " << f.train_acc << "\n";
  });
  write_text(out / "metrics.json", summary_json(metrics).dump(2) + "\n");
  write_text(out / "metrics.csv", metrics_csv(metrics));
  std::cout << "overall acc " << metrics.overall_acc() << " std " << metrics.overall_std() << "\n";
  return kOk;
}

struct FeaturizeOptions {
  std::vector<std::string> inputs;
  std::string out = "features";
  std::string layout;
  double segment_seconds = 3.0;
  double window_seconds = 0.5;
};

// A file that fails to parse is reported and skipped; the exit code is 2 if
// any failed. An input directory without recordings only warns.
int run_featurize(const FeaturizeOptions& o) {
  const auto layout = resolve_layout(o.layout);
  std::vector<std::string> files;
  for (const auto& in : o.inputs) {
    if (fs::is_directory(in)) {
      std::vector<std::string> found;
      for (const auto& e : fs::directory_iterator(in))
        if (e.path().extension() == ".e4dr") found.push_back(e.path().string());
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      if (!fs::exists(in)) throw DataError("no such file: " + in);
      files.push_back(in);
    }
  }
  if (files.empty()) std::cerr << "warning: no raw recordings (.e4dr) found\n";

  std::vector<Sample4D> all;
  std::optional<sigproc::FilterBank> bank;
  double bank_fs = 0.0;
  int failed = 0;
  std::size_t written = 0;
  const bool per_file = fs::path(o.out).extension() != ".e4da";
  for (const auto& f : files) {
    std::vector<Sample4D> samples;
    try {
      const auto rec = read_raw_file(f);
      if (!bank || bank_fs != rec.fs) {
        bank = sigproc::FilterBank::design(sigproc::canonical_bands(), rec.fs);
        bank_fs = rec.fs;
      }
      // Reorder channels to the layout's order by name.
      sigproc::RawRecording ordered = rec;
      ordered.channels.clear();
      ordered.data.clear();
      for (const auto& p : layout.placements) {
        const auto it = std::find(rec.channels.begin(), rec.channels.end(), p.channel);
        if (it == rec.channels.end()) throw DataError("channel " + p.channel + " missing");
        ordered.channels.push_back(p.channel);
        ordered.data.push_back(rec.data[static_cast<std::size_t>(it - rec.channels.begin())]);
      }
      for (const auto& seg : sigproc::segment(ordered, o.segment_seconds))
        samples.push_back(to_grid(sigproc::extract_features(seg, *bank, o.window_seconds), layout));
    } catch (const std::exception& e) {
      std::cerr << "error: " << f << ": " << e.what() << "\n";
      ++failed;
      continue;
    }
    std::cerr << f << ": " << samples.size() << " segments\n";
    if (per_file) {
      written += write_sample_dir(o.out, samples, fs::path(f).stem().string()).size();
    } else {
      all.insert(all.end(), samples.begin(), samples.end());
    }
  }
  if (!per_file) {
    write_output(o.out, all, "");
    written = all.size();
  } else {
    fs::create_directories(o.out);
  }
  std::cout << "wrote " << written << " samples to " << o.out << "\n";
  return failed ? kData : kOk;
}

struct SynthOptions {
  std::string out = "synth";
  std::string layout;
  std::string mode = "blocks";
  SynthSpec spec;
  int subjects = 1;
  int experiments = 1;
};

int run_synth(const SynthOptions& o) {
  const auto layout = resolve_layout(o.layout);
  std::vector<Sample4D> all;
  for (int s = 0; s < o.subjects; ++s)
    for (int e = 0; e < o.experiments; ++e) {
      SynthSpec spec = o.spec;
      spec.mode = o.mode == "single-slice" ? SynthMode::single_slice : SynthMode::blocks;
      spec.subject = s;
      spec.experiment = e;
      spec.seed = derive_seed(o.spec.seed, {static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(e)});
      auto part = synth_dataset(spec, layout);
      all.insert(all.end(), part.begin(), part.end());
    }
  write_output(o.out, all, "synth");
  std::cout << "wrote " << all.size() << " samples to " << o.out << "\n";
  return kOk;
}

struct ModelInput {
  std::string model;
  std::string data;
  std::string layout;
};

// Loads a checkpoint and the samples, applying the stored normalizer.
std::pair<Model<float>, std::vector<Sample4D>> load_for_inference(const ModelInput& in) {
  if (!fs::exists(in.model)) throw DataError("no such file: " + in.model);
  const auto ckpt = diff::read_checkpoint(in.model);
  auto model = load_model<float>(ckpt);
  auto samples = load_samples(in.data);
  const auto& mc = model.config();
  const int f = samples.front().features;
  if (f != mc.spectral_depth && f == 2 * mc.spectral_depth)
    throw DataError("samples carry " + std::to_string(f) + " feature slots, model expects " +
                    std::to_string(mc.spectral_depth) + "; rebuild them with the matching --features");
  if (const auto norm = checkpoint_normalizer(ckpt))
    for (auto& s : samples) s = normalize(s, *norm);
  return {std::move(model), std::move(samples)};
}

int run_evaluate(const ModelInput& in) {
  auto [model, samples] = load_for_inference(in);
  std::vector<const Sample4D*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  const double acc = evaluate_accuracy(model, ptrs);
  std::cout << "samples " << samples.size() << " accuracy " << acc << "\n";
  return kOk;
}

struct ExplainOptions {
  ModelInput in;
  std::size_t index = 0;
  int target = -1;
  std::string out = "heatmap";
  bool no_labels = false;
  int cell_px = 32;
};

int run_explain(const ExplainOptions& o) {
  const auto layout = resolve_layout(o.in.layout);
  auto [model, samples] = load_for_inference(o.in);
  if (o.index >= samples.size())
    throw DataError("sample index " + std::to_string(o.index) + " out of range (" + std::to_string(samples.size()) + " samples)");
  const auto& s = samples[o.index];
  const int target = o.target >= 0 ? o.target : s.label;
  if (target >= model.config().classes)
    throw CLI::ValidationError("--class", "must be below " + std::to_string(model.config().classes));
  const auto hm = gradcam_pp(model, s, target);
  const fs::path prefix(o.out);
  if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
  RenderOptions ro;
  ro.cell_px = o.cell_px;
  ro.labels = !o.no_labels;
  const auto files = render_heatmap(hm, layout, o.out, ro);
  std::cout << "wrote " << files.png << ", " << files.csv << ", " << files.report << "\n";
  for (const auto& c : top_channels(hm, layout, 3)) std::cout << c.channel << " " << c.value << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"4D attention network for EEG emotion recognition"};
  app.set_config("--config", "", "Read options from a key=value file");
  app.require_subcommand(1);

  FeaturizeOptions feat;
  auto* featurize = app.add_subcommand("featurize", "Raw recordings (.e4dr) -> 4D sample container");
  featurize->add_option("inputs", feat.inputs, "Raw files or directories")->required();
  featurize->add_option("--out", feat.out, "Output directory, or a .e4da container path")->capture_default_str();
  featurize->add_option("--layout", feat.layout, "Electrode layout file");
  featurize->add_option("--segment-seconds", feat.segment_seconds)->capture_default_str()->check(CLI::PositiveNumber);
  featurize->add_option("--window-seconds", feat.window_seconds)->capture_default_str()->check(CLI::PositiveNumber);

  SynthOptions syn;
  auto* synth = app.add_subcommand("synth", "Generate a labelled synthetic 4D dataset");
  synth->add_option("--out", syn.out, "Output directory, or a .e4da container path")->capture_default_str();
  synth->add_option("--layout", syn.layout);
  synth->add_option("--per-class", syn.spec.per_class)->capture_default_str()->check(CLI::NonNegativeNumber);
  synth->add_option("--classes", syn.spec.classes)->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--slices", syn.spec.slices)->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--seed", syn.spec.seed)->capture_default_str();
  synth->add_option("--amplitude", syn.spec.amplitude)->capture_default_str();
  synth->add_option("--noise", syn.spec.noise)->capture_default_str()->check(CLI::NonNegativeNumber);
  synth->add_option("--mode", syn.mode, "blocks or single-slice")
      ->capture_default_str()
      ->check(CLI::IsMember({"blocks", "single-slice"}));
  synth->add_option("--subjects", syn.subjects)->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--experiments", syn.experiments)->capture_default_str()->check(CLI::PositiveNumber);

  TrainOptions tr;
  auto* train = app.add_subcommand("train", "Cross-validate per subject and experiment");
  add_train_options(train, tr);
  train->add_flag("--no-spectral-attn", tr.no_spectral, "Disable spectral attention");
  train->add_flag("--no-spatial-attn", tr.no_spatial, "Disable spatial attention");
  train->add_flag("--no-temporal-attn", tr.no_temporal, "Disable temporal attention (uniform weights)");
  train->add_flag("--ablate", tr.ablate, "Run all five attention combinations instead");

  TrainOptions ab;
  auto* ablate = app.add_subcommand("ablate", "Attention ablation sweep over identical splits");
  add_train_options(ablate, ab);

  ExplainOptions ex;
  auto* explain = app.add_subcommand("explain", "Grad-CAM++ heatmap for one sample");
  explain->add_option("--model", ex.in.model, "Checkpoint (.e4dk)")->required();
  explain->add_option("--data", ex.in.data, "Sample file, container or directory")->required();
  explain->add_option("--layout", ex.in.layout);
  explain->add_option("--index", ex.index, "Sample index in the container")->capture_default_str();
  explain->add_option("--class", ex.target, "Target class (default: the sample's label)");
  explain->add_option("--out", ex.out, "Output prefix for .png/.csv/.top3.txt")->capture_default_str();
  explain->add_option("--cell-px", ex.cell_px)->capture_default_str()->check(CLI::Range(4, 256));
  explain->add_flag("--no-labels", ex.no_labels, "Omit electrode labels from the image");

  ModelInput ev;
  auto* evaluate = app.add_subcommand("evaluate", "Accuracy of a checkpoint on a sample container");
  evaluate->add_option("--model", ev.model)->required();
  evaluate->add_option("--data", ev.data)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*featurize) return run_featurize(feat);
    if (*synth) return run_synth(syn);
    if (*train) return run_train(app, "train", tr);
    if (*ablate) {
      ab.ablate = true;
      return run_train(app, "ablate", ab);
    }
    if (*explain) return run_explain(ex);
    if (*evaluate) return run_evaluate(ev);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ShapeMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const sigproc::InsufficientSamples& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const sigproc::InvalidWindow& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const sigproc::EmptyInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const std::invalid_argument& e) {
    // Bad option values surface here (unknown preset, invalid config).
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const LayoutError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kUsage;
}
