#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tima/attacks.hpp"
#include "tima/data.hpp"
#include "tima/error.hpp"
#include "tima/harness.hpp"
#include "tima/io.hpp"
#include "tima/losses.hpp"
#include "tima/model.hpp"

namespace tima {

/// Everything a CLI pipeline needs, with documented defaults filled in.
struct RunConfig {
  std::uint64_t seed = 0;
  SyntheticSpec data;
  EncoderConfig encoder;
  TrainConfig pretrain = TrainConfig::pretrain();
  TrainConfig finetune;
  AttackConfig eval_attack = AttackConfig::pgd10(0.0);
  std::vector<double> eval_eps{0.0, 1.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0};
  std::vector<double> export_eps{4.0 / 255.0};
  std::vector<double> sweep_m{0.0, 0.1, 0.2};
  std::vector<double> sweep_eta{0.9, 0.95};
  std::vector<double> sweep_eps{1.0 / 255.0};

  /// One seed drives every stream: data, init, shuffling, attacks.
  void apply_seed(std::uint64_t s) {
    seed = s;
    data.seed = s;
    encoder.seed = s;
    pretrain.seed = s;
    finetune.seed = s;
    finetune.train_attack.seed = s;
    eval_attack.seed = s;
  }

  /// Encoder shape that matches the generated data.
  EncoderConfig model_config() const {
    EncoderConfig c = encoder;
    c.input_dim = data.pixels();
    c.num_classes = data.num_classes();
    c.seed = seed;
    return c;
  }

  double tau() const noexcept { return finetune.loss_weights.tau; }
};

namespace cli_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  return out;
}

struct Field {
  std::string key;
  std::size_t line;
  std::string value;

  [[noreturn]] void type_error(const std::string& expected) const {
    throw Error(ErrorCode::TypeError,
                "line " + std::to_string(line) + ": " + key + " expects " + expected + ", got '" + value + "'");
  }
  [[noreturn]] void range_error(const std::string& rule) const {
    throw Error(ErrorCode::RangeError, "line " + std::to_string(line) + ": " + key + " " + rule + ", got '" + value + "'");
  }

  std::uint64_t as_uint(const std::string& text) const {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (text.empty() || ec != std::errc() || p != text.data() + text.size()) {
      if (!text.empty() && text[0] == '-') range_error("must be >= 0");
      type_error("an unsigned integer");
    }
    return v;
  }
  std::uint64_t as_uint() const { return as_uint(value); }

  double as_double(const std::string& text) const {
    double v = 0.0;
    auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (text.empty() || ec != std::errc() || p != text.data() + text.size() || !std::isfinite(v)) type_error("a number");
    return v;
  }
  double as_double() const { return as_double(value); }

  /// "k/255" or "0".
  double as_eps(const std::string& text) const {
    if (text == "0") return 0.0;
    const auto slash = text.find('/');
    if (slash == std::string::npos || text.substr(slash + 1) != "255") type_error("an epsilon of the form k/255");
    const std::string num = text.substr(0, slash);
    if (!num.empty() && num[0] == '-') range_error("must be >= 0");
    std::uint64_t k = 0;
    auto [p, ec] = std::from_chars(num.data(), num.data() + num.size(), k);
    if (num.empty() || ec != std::errc() || p != num.data() + num.size()) type_error("an epsilon of the form k/255");
    return static_cast<double>(k) / 255.0;
  }
  double as_eps() const { return as_eps(value); }

  bool as_bool() const {
    if (value == "true") return true;
    if (value == "false") return false;
    type_error("true or false");
  }

  std::vector<double> as_eps_list() const {
    std::vector<double> out;
    for (const auto& item : split_list(value)) out.push_back(as_eps(item));
    if (out.empty()) range_error("must list at least one value");
    return out;
  }
  std::vector<double> as_double_list() const {
    std::vector<double> out;
    for (const auto& item : split_list(value)) out.push_back(as_double(item));
    if (out.empty()) range_error("must list at least one value");
    return out;
  }
  std::vector<std::size_t> as_uint_list() const {
    std::vector<std::size_t> out;
    for (const auto& item : split_list(value)) out.push_back(as_uint(item));
    if (out.empty()) range_error("must list at least one value");
    return out;
  }
};

inline std::size_t positive(const Field& f) {
  const auto v = f.as_uint();
  if (v < 1) f.range_error("must be >= 1");
  return v;
}

inline double non_negative(const Field& f) {
  const double v = f.as_double();
  if (!(v >= 0.0)) f.range_error("must be >= 0");
  return v;
}

inline double strictly_positive(const Field& f) {
  const double v = f.as_double();
  if (!(v > 0.0)) f.range_error("must be > 0");
  return v;
}

inline double open_unit(const Field& f, double v) {
  if (!(v > 0.0 && v < 1.0)) f.range_error("must lie in (0, 1)");
  return v;
}

inline TextSource text_source(const Field& f) {
  if (f.value == "student") return TextSource::student;
  if (f.value == "teacher") return TextSource::teacher;
  f.type_error("student or teacher");
}

using Setter = std::function<void(RunConfig&, const Field&)>;

inline const std::map<std::string, Setter>& schema() {
  static const std::map<std::string, Setter> table = {
      {"seed", [](RunConfig& c, const Field& f) { c.apply_seed(f.as_uint()); }},
      // data
      {"num_superclasses", [](RunConfig& c, const Field& f) { c.data.num_superclasses = positive(f); }},
      {"subclasses_per_superclass", [](RunConfig& c, const Field& f) { c.data.subclasses_per_superclass = positive(f); }},
      {"image_side", [](RunConfig& c, const Field& f) { c.data.image_side = positive(f); }},
      {"within_super_shift", [](RunConfig& c, const Field& f) { c.data.within_super_shift = non_negative(f); }},
      {"noise_sigma", [](RunConfig& c, const Field& f) { c.data.noise_sigma = non_negative(f); }},
      {"train_count", [](RunConfig& c, const Field& f) { c.data.train_count = positive(f); }},
      {"test_count", [](RunConfig& c, const Field& f) { c.data.test_count = positive(f); }},
      // model
      {"hidden_dims",
       [](RunConfig& c, const Field& f) {
         auto dims = f.value.empty() ? std::vector<std::size_t>{} : f.as_uint_list();
         for (auto d : dims)
           if (d < 1) f.range_error("entries must be >= 1");
         c.encoder.hidden_dims = dims;
       }},
      {"embed_dim",
       [](RunConfig& c, const Field& f) {
         const auto v = f.as_uint();
         if (v < 2) f.range_error("must be >= 2");
         c.encoder.embed_dim = v;
       }},
      // losses
      {"tau", [](RunConfig& c, const Field& f) { c.finetune.loss_weights.tau = strictly_positive(f); }},
      {"m", [](RunConfig& c, const Field& f) { c.finetune.loss_weights.m = non_negative(f); }},
      {"eta", [](RunConfig& c, const Field& f) { c.finetune.loss_weights.eta = open_unit(f, f.as_double()); }},
      {"lambda", [](RunConfig& c, const Field& f) { c.finetune.loss_weights.lambda = non_negative(f); }},
      {"lambda_t", [](RunConfig& c, const Field& f) { c.finetune.loss_weights.lambda_t = non_negative(f); }},
      {"lambda_v", [](RunConfig& c, const Field& f) { c.finetune.loss_weights.lambda_v = non_negative(f); }},
      {"margin_sign",
       [](RunConfig& c, const Field& f) {
         if (f.value == "literal") c.finetune.margin_sign = MarginSign::literal;
         else if (f.value == "negate_negatives") c.finetune.margin_sign = MarginSign::negate_negatives;
         else f.type_error("literal or negate_negatives");
       }},
      // pretraining
      {"pretrain_lr", [](RunConfig& c, const Field& f) { c.pretrain.learning_rate = strictly_positive(f); }},
      {"pretrain_epochs", [](RunConfig& c, const Field& f) { c.pretrain.epochs = positive(f); }},
      // fine-tuning
      {"variant",
       [](RunConfig& c, const Field& f) {
         try {
           c.finetune.variant = parse_variant(f.value);
         } catch (const Error&) {
           f.type_error("one of tima, tecoa, iat_only, tai_only, mhe_only");
         }
       }},
      {"lr", [](RunConfig& c, const Field& f) { c.finetune.learning_rate = strictly_positive(f); }},
      {"momentum",
       [](RunConfig& c, const Field& f) {
         const double v = f.as_double();
         if (!(v >= 0.0 && v < 1.0)) f.range_error("must lie in [0, 1)");
         c.finetune.momentum = c.pretrain.momentum = v;
       }},
      {"epochs", [](RunConfig& c, const Field& f) { c.finetune.epochs = positive(f); }},
      {"batch_size", [](RunConfig& c, const Field& f) { c.finetune.batch_size = c.pretrain.batch_size = positive(f); }},
      {"freeze_text", [](RunConfig& c, const Field& f) { c.finetune.freeze_text = f.as_bool(); }},
      {"train_eps", [](RunConfig& c, const Field& f) { c.finetune.train_attack.epsilon = f.as_eps(); }},
      {"train_step", [](RunConfig& c, const Field& f) {
         const double v = f.as_eps();
         if (!(v > 0.0)) f.range_error("must be > 0");
         c.finetune.train_attack.step_size = v;
       }},
      {"train_steps", [](RunConfig& c, const Field& f) { c.finetune.train_attack.steps = f.as_uint(); }},
      {"train_restarts", [](RunConfig& c, const Field& f) { c.finetune.train_attack.restarts = f.as_uint(); }},
      {"train_attack_text", [](RunConfig& c, const Field& f) { c.finetune.train_attack.text_source = text_source(f); }},
      // evaluation
      {"eps", [](RunConfig& c, const Field& f) { c.eval_eps = f.as_eps_list(); }},
      {"eval_step", [](RunConfig& c, const Field& f) {
         const double v = f.as_eps();
         if (!(v > 0.0)) f.range_error("must be > 0");
         c.eval_attack.step_size = v;
       }},
      {"eval_steps", [](RunConfig& c, const Field& f) { c.eval_attack.steps = f.as_uint(); }},
      {"eval_restarts", [](RunConfig& c, const Field& f) { c.eval_attack.restarts = f.as_uint(); }},
      {"export_eps", [](RunConfig& c, const Field& f) { c.export_eps = f.as_eps_list(); }},
      // sweep grid
      {"sweep_m",
       [](RunConfig& c, const Field& f) {
         c.sweep_m = f.as_double_list();
         for (double v : c.sweep_m)
           if (!(v >= 0.0)) f.range_error("entries must be >= 0");
       }},
      {"sweep_eta",
       [](RunConfig& c, const Field& f) {
         c.sweep_eta = f.as_double_list();
         for (double v : c.sweep_eta) open_unit(f, v);
       }},
      {"sweep_eps", [](RunConfig& c, const Field& f) { c.sweep_eps = f.as_eps_list(); }},
  };
  return table;
}

inline nlohmann::json eps_json(const std::vector<double>& eps) {
  nlohmann::json out = nlohmann::json::array();
  for (double e : eps) out.push_back(eps_label(e));
  return out;
}

}  // namespace cli_detail

/// Parses `key = value` lines; `#` starts a comment. Later keys override
/// earlier ones, except that `seed` is applied last so it reaches every
/// stream regardless of position.
inline RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  std::optional<cli_detail::Field> seed;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string body = cli_detail::trim(std::string_view(raw).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::TypeError, "line " + std::to_string(line) + ": expected 'key = value'");
    }
    cli_detail::Field f{cli_detail::trim(std::string_view(body).substr(0, eq)), line,
                        cli_detail::trim(std::string_view(body).substr(eq + 1))};
    const auto& table = cli_detail::schema();
    auto it = table.find(f.key);
    if (it == table.end()) throw Error(ErrorCode::UnknownKey, "line " + std::to_string(line) + ": unknown key '" + f.key + "'");
    if (f.key == "seed") {
      f.as_uint();
      seed = f;
      continue;
    }
    it->second(cfg, f);
  }
  cfg.apply_seed(seed ? seed->as_uint() : cfg.seed);
  cfg.data.validate();
  cfg.model_config().validate();
  cfg.finetune.validate();
  cfg.pretrain.validate();
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) { return parse_config(io::read_text(path)); }

/// Canonical echo of every setting, stored in reports.
inline nlohmann::json config_to_json(const RunConfig& c) {
  using nlohmann::json;
  const auto& w = c.finetune.loss_weights;
  const auto& ta = c.finetune.train_attack;
  return json{
      {"seed", c.seed},
      {"num_superclasses", c.data.num_superclasses},
      {"subclasses_per_superclass", c.data.subclasses_per_superclass},
      {"image_side", c.data.image_side},
      {"within_super_shift", c.data.within_super_shift},
      {"noise_sigma", c.data.noise_sigma},
      {"train_count", c.data.train_count},
      {"test_count", c.data.test_count},
      {"hidden_dims", c.encoder.hidden_dims},
      {"embed_dim", c.encoder.embed_dim},
      {"tau", w.tau},
      {"m", w.m},
      {"eta", w.eta},
      {"lambda", w.lambda},
      {"lambda_t", w.lambda_t},
      {"lambda_v", w.lambda_v},
      {"margin_sign", c.finetune.margin_sign == MarginSign::literal ? "literal" : "negate_negatives"},
      {"pretrain_lr", c.pretrain.learning_rate},
      {"pretrain_epochs", c.pretrain.epochs},
      {"variant", variant_name(c.finetune.variant)},
      {"lr", c.finetune.learning_rate},
      {"momentum", c.finetune.momentum},
      {"epochs", c.finetune.epochs},
      {"batch_size", c.finetune.batch_size},
      {"freeze_text", c.finetune.freeze_text},
      {"train_eps", eps_label(ta.epsilon)},
      {"train_step", eps_label(ta.step_size)},
      {"train_steps", ta.steps},
      {"train_restarts", ta.restarts},
      {"train_attack_text", ta.text_source == TextSource::student ? "student" : "teacher"},
      {"eps", cli_detail::eps_json(c.eval_eps)},
      {"eval_step", eps_label(c.eval_attack.step_size)},
      {"eval_steps", c.eval_attack.steps},
      {"eval_restarts", c.eval_attack.restarts},
      {"export_eps", cli_detail::eps_json(c.export_eps)},
      {"sweep_m", c.sweep_m},
      {"sweep_eta", c.sweep_eta},
      {"sweep_eps", cli_detail::eps_json(c.sweep_eps)},
  };
}

// ---------------------------------------------------------------------------
// Pipelines. Every artifact lives under one output directory.

namespace pipeline {

inline constexpr const char* kTrainFile = "train.timd";
inline constexpr const char* kTestFile = "test.timd";
inline constexpr const char* kProbeFile = "probe.timd";
inline constexpr const char* kTeacherFile = "teacher.timm";
inline constexpr const char* kStudentFile = "student.timm";
inline constexpr const char* kReportFile = "report.json";
inline constexpr const char* kMatrixDir = "matrices";
inline constexpr const char* kSweepDir = "sweep";

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
}

inline void gen_data(const RunConfig& c, const std::filesystem::path& out) {
  ensure_dir(out);
  auto [train, test] = generate_synthetic(c.data);
  save_dataset(train, out / kTrainFile);
  save_dataset(test, out / kTestFile);
  save_dataset(generate_shift_probe(c.data), out / kProbeFile);
}

inline DualEncoder pretrain(const RunConfig& c, const std::filesystem::path& out) {
  const Dataset train = load_dataset(out / kTrainFile, Split::train);
  DualEncoder model = init_model(c.model_config());
  model.temperature = c.tau();
  pretrain_clean(model, train, c.pretrain);
  save_checkpoint(model, out / kTeacherFile);
  return model;
}

inline nlohmann::json trace_json(const TrainTrace& t) {
  nlohmann::json batches = nlohmann::json::array();
  for (const auto& b : t.batches) {
    batches.push_back({{"tam", b.tam}, {"takd", b.takd}, {"mhe", b.mhe}, {"iakd", b.iakd}, {"total", b.total}});
  }
  return {{"epoch_loss", t.epoch_loss}, {"batches", batches}};
}

inline DualEncoder finetune_student(const RunConfig& c, const std::filesystem::path& out, const std::filesystem::path& save_to) {
  const Dataset train = load_dataset(out / kTrainFile, Split::train);
  const DualEncoder teacher_model = load_checkpoint(out / kTeacherFile);
  const TeacherSnapshot teacher(teacher_model);
  DualEncoder student = teacher_model;
  TrainTrace trace = finetune(student, teacher, train, c.finetune);
  save_checkpoint(student, save_to);
  const auto stem = save_to.parent_path() / save_to.stem();
  io::write_text(stem.string() + "_trace.json", trace_json(trace).dump(2) + "\n");
  io::write_text(stem.string() + "_config.json", config_to_json(c).dump(2) + "\n");
  return student;
}

inline constexpr const char* kEvalKeys[] = {"eps", "eval_step", "eval_steps", "eval_restarts", "export_eps"};

/// Echo for a report: the settings the student was trained with, plus the
/// evaluation settings of this run.
inline nlohmann::json report_config(const RunConfig& c, const std::filesystem::path& student_path) {
  nlohmann::json echo = config_to_json(c);
  const auto trained = std::filesystem::path(student_path.parent_path() / student_path.stem()).string() + "_config.json";
  if (!std::filesystem::exists(trained)) return echo;
  nlohmann::json base;
  try {
    base = nlohmann::json::parse(io::read_text(trained));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Schema, trained + " is not valid JSON: " + e.what());
  }
  for (const char* key : kEvalKeys) base[key] = echo.at(key);
  return base;
}

inline std::vector<MatrixFile> export_matrices(const RunConfig& c, const std::filesystem::path& out,
                                               const DualEncoder& student, const TeacherSnapshot& teacher) {
  const Dataset test = load_dataset(out / kTestFile, Split::test);
  return export_similarity_matrices(student, teacher, test, c.export_eps, out / kMatrixDir, c.eval_attack);
}

inline EvalReport evaluate_student(const RunConfig& c, const std::filesystem::path& out, const DualEncoder& student,
                                   const TeacherSnapshot& teacher) {
  const Dataset test = load_dataset(out / kTestFile, Split::test);
  const Dataset probe = load_dataset(out / kProbeFile, Split::probe);
  EvalReport r = evaluate(student, teacher, test, &probe, c.eval_eps, c.eval_attack);
  r.config = config_to_json(c);
  r.seed = c.seed;
  return r;
}

}  // namespace pipeline

inline constexpr const char* kSubcommands = "gen-data, pretrain, finetune, eval, export-matrices, sweep";

/// Runs one subcommand. Returns the process exit status; diagnostics go
/// to `err`, progress lines to `out`.
inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Adversarial fine-tuning lab for a toy dual encoder"};
  app.name("tima");
  std::string config_path;
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;
  std::string variant;
  app.add_option("--config", config_path, "key = value configuration file (defaults when omitted)");
  app.add_option("--out", out_dir, "directory holding every artifact")->capture_default_str();
  app.add_option("--seed", seed, "overrides the config seed");
  app.add_option("--variant", variant, "overrides the config variant: tima, tecoa, iat_only, tai_only, mhe_only");
  app.require_subcommand(1, 1);
  app.fallthrough();
  auto* gen = app.add_subcommand("gen-data", "generate train, test, and shift-probe datasets");
  auto* pre = app.add_subcommand("pretrain", "clean pretraining; writes the teacher checkpoint");
  auto* fin = app.add_subcommand("finetune", "adversarial fine-tuning of the teacher; writes the student");
  auto* ev = app.add_subcommand("eval", "evaluate the student; writes report.json and matrices/");
  auto* exp = app.add_subcommand("export-matrices", "write similarity matrices as CSV and PGM");
  auto* sweep = app.add_subcommand("sweep", "fine-tune and evaluate over the (m, eta, eps) grid");
  for (auto* s : {gen, pre, fin, ev, exp, sweep}) s->fallthrough();

  std::vector<const char*> argv{"tima"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    RunConfig c = config_path.empty() ? parse_config("") : load_config(config_path);
    if (seed) c.apply_seed(*seed);
    if (!variant.empty()) c.finetune.variant = parse_variant(variant);
    const std::filesystem::path dir(out_dir);

    if (gen->parsed()) {
      pipeline::gen_data(c, dir);
      out << "wrote " << (dir / pipeline::kTrainFile).string() << ", " << pipeline::kTestFile << ", " << pipeline::kProbeFile
          << "\n";
    } else if (pre->parsed()) {
      DualEncoder m = pipeline::pretrain(c, dir);
      const Dataset test = load_dataset(dir / pipeline::kTestFile, Split::test);
      out << "teacher clean accuracy " << eval_clean(m, test) << "\n";
    } else if (fin->parsed()) {
      DualEncoder s = pipeline::finetune_student(c, dir, dir / pipeline::kStudentFile);
      const Dataset test = load_dataset(dir / pipeline::kTestFile, Split::test);
      out << variant_name(c.finetune.variant) << " student clean accuracy " << eval_clean(s, test) << "\n";
    } else if (ev->parsed() || exp->parsed()) {
      const DualEncoder student = load_checkpoint(dir / pipeline::kStudentFile);
      const TeacherSnapshot teacher(load_checkpoint(dir / pipeline::kTeacherFile));
      auto files = pipeline::export_matrices(c, dir, student, teacher);
      if (ev->parsed()) {
        EvalReport r = pipeline::evaluate_student(c, dir, student, teacher);
        r.config = pipeline::report_config(c, dir / pipeline::kStudentFile);
        r.matrices = std::move(files);
        write_report(r, dir / pipeline::kReportFile);
        out << "clean " << r.clean_accuracy;
        for (const auto& [k, v] : r.robust_accuracy) out << "  pgd@" << k << " " << v;
        out << "\n";
      } else {
        out << "wrote " << files.size() << " matrices under " << (dir / pipeline::kMatrixDir).string() << "\n";
      }
    } else if (sweep->parsed()) {
      pipeline::ensure_dir(dir / pipeline::kSweepDir);
      const TeacherSnapshot teacher(load_checkpoint(dir / pipeline::kTeacherFile));
      nlohmann::json index = nlohmann::json::array();
      std::size_t i = 0;
      for (double m : c.sweep_m)
        for (double eta : c.sweep_eta)
          for (double eps : c.sweep_eps) {
            RunConfig point = c;
            point.finetune.loss_weights.m = m;
            point.finetune.loss_weights.eta = eta;
            point.finetune.train_attack.epsilon = eps;
            const auto name = "report_" + std::to_string(i);
            DualEncoder s = pipeline::finetune_student(point, dir, dir / pipeline::kSweepDir / (name + ".timm"));
            EvalReport r = pipeline::evaluate_student(point, dir, s, teacher);
            write_report(r, dir / pipeline::kSweepDir / (name + ".json"));
            index.push_back({{"report", name + ".json"}, {"m", m}, {"eta", eta}, {"train_eps", eps_label(eps)}});
            out << name << " m=" << m << " eta=" << eta << " eps=" << eps_label(eps) << " clean " << r.clean_accuracy << "\n";
            ++i;
          }
      io::write_text(dir / pipeline::kSweepDir / "index.json", index.dump(2) + "\n");
    }
    return 0;
  } catch (const Error& e) {
    err << "error " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(std::move(args));
}

}  // namespace tima
