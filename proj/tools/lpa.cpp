// lpa: preprocess datasets, train attention-VGG models, evaluate checkpoints
// and export attention heatmaps.
//
// Exit codes: 0 success, 2 usage/configuration, 3 input/IO, 4 format,
// 5 numeric divergence.

#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "lpa/lpa.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitInput = 3;

bool deterministic_mode() {
  const char* v = std::getenv("ATTN_DETERMINISTIC");
  return v && std::string(v) == "1";
}

std::string decimal(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, end);
  if (s.find_first_of(".e") == std::string::npos && s.find("inf") == std::string::npos &&
      s.find("nan") == std::string::npos)
    s += ".0";
  return s;
}

struct PreprocessArgs {
  std::string dataset;
  fs::path raw_dir;
  fs::path out;
  double epsilon = lpa::kDefaultZcaEpsilon;
};

int cmd_preprocess(const PreprocessArgs& a) {
  const lpa::DatasetName name = lpa::parse_dataset_name(a.dataset);
  if (!(a.epsilon > 0)) throw lpa::UsageError("--epsilon must be positive");
  lpa::DatasetBundle bundle = name == lpa::DatasetName::svhn ? lpa::load_svhn(a.raw_dir)
                                                             : lpa::load_cifar(name == lpa::DatasetName::cifar10 ? 10 : 100,
                                                                               a.raw_dir);
  const std::size_t n_train = bundle.train_labels.size(), n_test = bundle.test_labels.size();
  const lpa::PackagedDataset pkg = lpa::preprocess(std::move(bundle), a.epsilon);
  lpa::save_package(a.out, pkg);
  std::cout << "wrote " << a.out.string() << " (" << a.dataset << ", " << n_train << " train / " << n_test
            << " test, preprocessing=" << pkg.preprocessing << ", epsilon=" << decimal(pkg.epsilon) << ")\n";
  return 0;
}

struct TrainArgs {
  int att = 3;
  std::string compat = "pc";
  std::string head = "concat";
  fs::path data;
  fs::path out;
  std::uint64_t seed = 0;
  std::optional<int> epochs;
  std::optional<double> lr;
  std::optional<double> decay_factor;
  std::optional<int> decay_period;
  std::optional<std::size_t> batch_size;
  std::optional<double> momentum;
  std::optional<double> weight_decay;
  std::size_t width_divisor = 1;
  std::optional<fs::path> resume;
};

void write_metrics(const fs::path& path, const lpa::MetricsLog& log) {
  std::ostringstream os;
  os << lpa::kMetricsHeader << '\n';
  for (const lpa::EpochRecord& r : log) os << lpa::metrics_csv_line(r) << '\n';
  const std::string s = os.str();
  lpa::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

lpa::MetricsLog read_metrics(const fs::path& path) {
  lpa::MetricsLog log;
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    lpa::EpochRecord r;
    char comma;
    std::istringstream ls(line);
    ls >> r.epoch >> comma >> r.lr >> comma >> r.train_loss >> comma >> r.train_err >> comma >> r.test_err >> comma >>
        r.seconds;
    if (ls) log.push_back(r);
  }
  return log;
}

int cmd_train(const TrainArgs& a) {
  lpa::ModelConfig config;
  config.att = a.att;
  config.compat = lpa::parse_compatibility(a.compat);
  config.head = lpa::parse_head_mode(a.head);
  config.width_divisor = a.width_divisor;

  const lpa::PackagedDataset pkg = lpa::load_package(a.data);
  config.num_classes = pkg.bundle.num_classes();
  config.validate();

  lpa::TrainSchedule schedule = lpa::TrainSchedule::for_dataset(pkg.bundle.name);
  if (a.epochs) schedule.epochs = *a.epochs;
  if (a.lr) schedule.initial_lr = *a.lr;
  if (a.decay_factor) schedule.decay_factor = *a.decay_factor;
  if (a.decay_period) schedule.decay_period = *a.decay_period;
  if (a.batch_size) schedule.batch_size = *a.batch_size;
  if (a.momentum) schedule.momentum = *a.momentum;
  if (a.weight_decay) schedule.weight_decay = *a.weight_decay;
  schedule.validate();

  std::optional<lpa::Checkpoint> resume;
  if (a.resume) {
    resume = lpa::load_checkpoint(*a.resume);
    if (!(resume->config == config))
      throw lpa::ConfigError("--resume checkpoint is " + resume->config.name() + ", flags request " + config.name());
  }

  fs::create_directories(a.out);
  const fs::path metrics_path = a.out / "metrics.csv";
  const fs::path final_path = a.out / "checkpoint.bin";
  const bool deterministic = deterministic_mode();

  json manifest = {
      {"model",
       {{"name", config.name()},
        {"att", config.att},
        {"compat", lpa::to_string(config.compat)},
        {"head", lpa::to_string(config.head)},
        {"num_classes", config.num_classes},
        {"width_divisor", config.width_divisor}}},
      {"schedule",
       {{"initial_lr", schedule.initial_lr},
        {"decay_factor", schedule.decay_factor},
        {"decay_period", schedule.decay_period},
        {"epochs", schedule.epochs},
        {"batch_size", schedule.batch_size},
        {"momentum", schedule.momentum},
        {"weight_decay", schedule.weight_decay}}},
      {"dataset",
       {{"path", fs::absolute(a.data).string()},
        {"name", lpa::to_string(pkg.bundle.name)},
        {"preprocessing", pkg.preprocessing},
        {"epsilon", pkg.epsilon}}},
      {"seed", a.seed},
      {"deterministic", deterministic},
      {"resume", a.resume ? json(fs::absolute(*a.resume).string()) : json(nullptr)},
      {"outputs", {{"metrics", metrics_path.string()}, {"checkpoint", final_path.string()}}},
  };
  {
    const std::string s = manifest.dump(2) + "\n";
    lpa::write_file(a.out / "manifest.json", std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  }

  lpa::MetricsLog log;
  if (resume && fs::exists(metrics_path))
    for (const lpa::EpochRecord& r : read_metrics(metrics_path))
      if (r.epoch < static_cast<int>(resume->epoch)) log.push_back(r);

  lpa::Network<float> net = lpa::Network<float>::build(config, a.seed);
  lpa::TrainOptions options;
  options.record_time = !deterministic;
  options.resume = resume ? &*resume : nullptr;
  options.on_epoch = [&](const lpa::EpochRecord& r) {
    log.push_back(r);
    write_metrics(metrics_path, log);
    std::cout << lpa::metrics_csv_line(r) << std::endl;
  };
  options.on_checkpoint = [&](const lpa::Checkpoint& ck) {
    char name[64];
    std::snprintf(name, sizeof name, "checkpoint_epoch_%03u.bin", ck.epoch);
    lpa::save_checkpoint(a.out / name, ck);
  };
  const lpa::TrainResult result = lpa::train(net, pkg.bundle, schedule, a.seed, options);
  lpa::save_checkpoint(final_path, result.final_checkpoint);
  std::cout << "final checkpoint: " << final_path.string() << '\n';
  return 0;
}

struct EvalArgs {
  fs::path checkpoint;
  fs::path data;
  std::string split = "test";
};

int cmd_eval(const EvalArgs& a) {
  const lpa::Checkpoint ck = lpa::load_checkpoint(a.checkpoint);
  const lpa::PackagedDataset pkg = lpa::load_package(a.data);
  if (ck.config.num_classes != pkg.bundle.num_classes())
    throw lpa::ConfigError("checkpoint predicts " + std::to_string(ck.config.num_classes) + " classes but dataset " +
                           lpa::to_string(pkg.bundle.name) + " has " + std::to_string(pkg.bundle.num_classes()));
  lpa::Network<float> net = lpa::network_from_checkpoint<float>(ck);
  const bool train = a.split == "train";
  const double err = lpa::evaluate(net, train ? pkg.bundle.train_images : pkg.bundle.test_images,
                                   std::span<const int>(train ? pkg.bundle.train_labels : pkg.bundle.test_labels));
  std::cout << "top1_error=" << decimal(err) << '\n';
  return 0;
}

struct AttmapArgs {
  fs::path checkpoint;
  std::optional<fs::path> image;
  std::optional<fs::path> data;
  std::size_t index = 0;
  std::string split = "test";
  fs::path out;
};

int cmd_attmap(const AttmapArgs& a) {
  if (a.image.has_value() == a.data.has_value()) throw lpa::UsageError("give exactly one of --image or --data");
  const lpa::Checkpoint ck = lpa::load_checkpoint(a.checkpoint);
  lpa::Network<float> net = lpa::network_from_checkpoint<float>(ck);

  lpa::Tensor<float> image;
  if (a.image) {
    image = lpa::read_input_image(*a.image);
  } else {
    const lpa::PackagedDataset pkg = lpa::load_package(*a.data);
    const lpa::Tensor<float>& images = a.split == "train" ? pkg.bundle.train_images : pkg.bundle.test_images;
    if (a.index >= images.dim(0))
      throw lpa::UsageError("--index " + std::to_string(a.index) + " out of range (split has " +
                            std::to_string(images.dim(0)) + " images)");
    std::vector<float> px(images.data() + a.index * lpa::kPixelsPerImage,
                          images.data() + (a.index + 1) * lpa::kPixelsPerImage);
    image = lpa::Tensor<float>({3, 32, 32}, std::move(px));
  }

  const lpa::ForwardResult<float> fr = net.predict(image.reshaped({1, 3, 32, 32}));
  fs::create_directories(a.out);
  std::vector<lpa::GrayImage> heatmaps;
  for (std::size_t i = 0; i < fr.levels.size(); ++i) {
    const auto [h, w] = fr.grids[i];
    heatmaps.push_back(lpa::render_heatmap(fr.attention[i].values(), h, w));
    const fs::path path = a.out / ("attention_level" + std::to_string(fr.levels[i]) + ".pgm");
    lpa::write_pgm(path, heatmaps.back());
    std::cout << "wrote " << path.string() << '\n';
  }
  const fs::path overlay_path = a.out / "overlay.ppm";
  lpa::write_ppm(overlay_path, lpa::overlay(lpa::average_heatmaps(heatmaps), lpa::to_rgb(image)));
  std::cout << "wrote " << overlay_path.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-VGG toolkit: preprocess, train, eval, attmap"};
  app.require_subcommand(1);

  PreprocessArgs pre;
  auto* sp = app.add_subcommand("preprocess", "Parse raw data, whiten CIFAR (ZCA), write a packaged dataset");
  sp->add_option("--dataset", pre.dataset, "Dataset name")->required()->check(CLI::IsMember({"cifar10", "cifar100", "svhn"}));
  sp->add_option("--raw-dir", pre.raw_dir, "Directory with the raw binary record files")->required();
  sp->add_option("--out", pre.out, "Output package file")->required();
  sp->add_option("--epsilon", pre.epsilon, "ZCA regularizer")->capture_default_str();

  TrainArgs tr;
  auto* st = app.add_subcommand("train", "Train one of the 12 model configurations");
  st->add_option("--att", tr.att, "Number of attention levels")->check(CLI::IsMember({1, 2, 3}))->capture_default_str();
  st->add_option("--compat", tr.compat, "Compatibility function")->check(CLI::IsMember({"dp", "pc"}))->capture_default_str();
  st->add_option("--head", tr.head, "Classifier head mode")->check(CLI::IsMember({"concat", "indep"}))->capture_default_str();
  st->add_option("--data", tr.data, "Packaged dataset")->required();
  st->add_option("--out", tr.out, "Output directory")->required();
  st->add_option("--seed", tr.seed, "Initialization and shuffling seed")->capture_default_str();
  st->add_option("--epochs", tr.epochs, "Epoch count (default 300)");
  st->add_option("--lr", tr.lr, "Initial learning rate (default 0.01 CIFAR, 0.0025 SVHN)");
  st->add_option("--decay-factor", tr.decay_factor, "Learning-rate decay factor (default 0.5)");
  st->add_option("--decay-period", tr.decay_period, "Epochs between decays (default 25)");
  st->add_option("--batch-size", tr.batch_size, "Mini-batch size (default 128)");
  st->add_option("--momentum", tr.momentum, "SGD momentum (default 0.9)");
  st->add_option("--weight-decay", tr.weight_decay, "L2 weight decay (default 5e-4)");
  st->add_option("--width-divisor", tr.width_divisor, "Divide all channel widths (1 = full VGG)")->capture_default_str();
  st->add_option("--resume", tr.resume, "Continue from a checkpoint");

  EvalArgs ev;
  auto* se = app.add_subcommand("eval", "Print the top-1 error of a checkpoint");
  se->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  se->add_option("--data", ev.data, "Packaged dataset")->required();
  se->add_option("--split", ev.split, "Split to evaluate")->check(CLI::IsMember({"train", "test"}))->capture_default_str();

  AttmapArgs am;
  auto* sa = app.add_subcommand("attmap", "Write per-level attention heatmaps (PGM) and an overlay (PPM)");
  sa->add_option("--checkpoint", am.checkpoint, "Checkpoint file")->required();
  sa->add_option("--image", am.image, "32x32 binary PPM or 3072-byte planar RGB file");
  sa->add_option("--data", am.data, "Packaged dataset to take the image from");
  sa->add_option("--index", am.index, "Image index within --data")->capture_default_str();
  sa->add_option("--split", am.split, "Split of --data")->check(CLI::IsMember({"train", "test"}))->capture_default_str();
  sa->add_option("--out", am.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*sp) return cmd_preprocess(pre);
    if (*st) return cmd_train(tr);
    if (*se) return cmd_eval(ev);
    if (*sa) return cmd_attmap(am);
  } catch (const lpa::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  }
  return kExitUsage;
}
