#include "vitplast/serialize.hpp"

#include <array>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "vitplast/errors.hpp"

namespace vitplast {

namespace {

constexpr std::array<char, 4> kMagic = {'V', 'C', 'K', 'P'};
constexpr std::uint8_t kVersion = 1;

template <typename U>
void put_le(std::ostream& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.put(static_cast<char>((value >> (8 * i)) & 0xff));
  }
}

template <typename U>
U get_le(std::istream& in, const char* what) {
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) {
      throw FormatError(std::string("truncated checkpoint while reading ") + what);
    }
    value |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return value;
}

// Config as ten doubles; the seed is split so every bit survives.
Tensor encode_config(const ViTConfig& c) {
  return Tensor({10}, {static_cast<double>(c.image_size), static_cast<double>(c.patch_size),
                       static_cast<double>(c.channels), static_cast<double>(c.embed_dim),
                       static_cast<double>(c.num_heads), static_cast<double>(c.num_layers),
                       static_cast<double>(c.num_classes), c.ln_eps,
                       static_cast<double>(c.seed >> 32),
                       static_cast<double>(c.seed & 0xffffffffULL)});
}

ViTConfig decode_config(const Tensor& t) {
  if (t.shape() != Shape{10}) throw FormatError("checkpoint config entry has the wrong shape");
  auto count = [&](std::size_t i) {
    const double v = t[i];
    if (!(v >= 0 && v == static_cast<double>(static_cast<std::uint64_t>(v)))) {
      throw FormatError("checkpoint config field " + std::to_string(i) + " is not a count");
    }
    return static_cast<std::size_t>(v);
  };
  ViTConfig c;
  c.image_size = count(0);
  c.patch_size = count(1);
  c.channels = count(2);
  c.embed_dim = count(3);
  c.num_heads = count(4);
  c.num_layers = count(5);
  c.num_classes = count(6);
  c.ln_eps = t[7];
  c.seed = (static_cast<std::uint64_t>(count(8)) << 32) | static_cast<std::uint64_t>(count(9));
  c.validate();
  return c;
}

template <std::size_t N>
Json kinds_to_json(const std::array<ComponentKind, N>& kinds) {
  Json arr = Json::array();
  for (ComponentKind k : kinds) arr.push_back(component_name(k));
  return arr;
}

Json kind_means_to_json(const std::array<double, 5>& means) {
  Json obj = Json::object();
  for (ComponentKind k : kComponentKinds) obj[std::string(component_name(k))] = means[static_cast<std::size_t>(k)];
  return obj;
}

Json mha_to_json(const MhaBound& b) {
  Json heads = Json::array();
  for (std::size_t h = 0; h < b.norms.size(); ++h) {
    heads.push_back({{"o_norm", b.norms[h].o},
                     {"v_norm", b.norms[h].v},
                     {"a_norm", b.norms[h].a},
                     {"term", b.per_head[h]}});
  }
  return {{"total", b.total}, {"heads", heads}};
}

}  // namespace

// ---- Checkpoints ----------------------------------------------------------

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint8_t>(out, kVersion);
  for (int i = 0; i < 3; ++i) put_le<std::uint8_t>(out, 0);
  put_le<std::uint64_t>(out, ckpt.entries.size());
  std::vector<std::string> seen;
  for (const CheckpointEntry& e : ckpt.entries) {
    if (std::find(seen.begin(), seen.end(), e.name) != seen.end()) {
      throw FormatError("duplicate checkpoint entry '" + e.name + "'");
    }
    seen.push_back(e.name);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_tensor(out, e.value, e.dtype);
  }
  if (!out) throw FormatError("failed writing checkpoint");
}

Checkpoint read_checkpoint(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size())) throw FormatError("truncated checkpoint (magic)");
  if (magic != kMagic) throw FormatError("bad checkpoint magic, expected VCKP");
  const auto version = get_le<std::uint8_t>(in, "version");
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  for (int i = 0; i < 3; ++i) get_le<std::uint8_t>(in, "reserved");
  const auto count = get_le<std::uint64_t>(in, "entry count");
  Checkpoint ckpt;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint32_t>(in, "name length");
    if (len > (1u << 16)) throw FormatError("checkpoint entry name too long");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw FormatError("truncated checkpoint entry name");
    for (const CheckpointEntry& e : ckpt.entries) {
      if (e.name == name) throw FormatError("duplicate checkpoint entry '" + name + "'");
    }
    CheckpointEntry e;
    e.name = std::move(name);
    e.value = read_tensor(in, std::nullopt, &e.dtype);
    ckpt.entries.push_back(std::move(e));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ostringstream buf(std::ios::binary);
  write_checkpoint(buf, ckpt);
  write_file_atomic(path, buf.str());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  Checkpoint c = read_checkpoint(in);
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("trailing bytes after checkpoint in " + path.string());
  }
  return c;
}

Checkpoint model_checkpoint(const Model& model) {
  Checkpoint c;
  c.entries.push_back({kConfigEntry, encode_config(model.config), DType::F64});
  for (const ParamEntry& e : model.params.entries()) {
    Tensor v = e.value;
    v.set_name({});
    c.entries.push_back({e.name, std::move(v), DType::F64});
  }
  return c;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.entries.empty() || ckpt.entries.front().name != kConfigEntry) {
    throw FormatError("checkpoint does not start with a config entry");
  }
  Model m = make_model(decode_config(ckpt.entries.front().value));
  std::size_t matched = 0;
  for (std::size_t i = 1; i < ckpt.entries.size(); ++i) {
    const CheckpointEntry& e = ckpt.entries[i];
    if (!m.params.contains(e.name)) throw FormatError("unexpected checkpoint entry '" + e.name + "'");
    Tensor& dst = m.params.at(e.name);
    if (dst.shape() != e.value.shape()) {
      throw FormatError("checkpoint entry '" + e.name + "' has shape " +
                        shape_string(e.value.shape()) + ", expected " + shape_string(dst.shape()));
    }
    std::copy(e.value.values().begin(), e.value.values().end(), dst.values().begin());
    ++matched;
  }
  if (matched != m.params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(matched) + " of " +
                      std::to_string(m.params.size()) + " parameters");
  }
  m.params.freeze_all();
  return m;
}

void save_model(const std::filesystem::path& path, const Model& model) {
  save_checkpoint(path, model_checkpoint(model));
}

Model load_model(const std::filesystem::path& path) {
  return model_from_checkpoint(load_checkpoint(path));
}

// ---- JSON -----------------------------------------------------------------

Json config_to_json(const ViTConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size},
          {"channels", c.channels},     {"embed_dim", c.embed_dim},
          {"num_heads", c.num_heads},   {"num_layers", c.num_layers},
          {"num_classes", c.num_classes}, {"ln_eps", c.ln_eps},
          {"seed", c.seed},             {"seq_len", c.seq_len()}};
}

ViTConfig config_from_json(const Json& j) {
  ViTConfig c;
  c.image_size = j.at("image_size").get<std::size_t>();
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.ln_eps = j.at("ln_eps").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

Json finetune_config_to_json(const FinetuneConfig& f) {
  return {{"group", group_name(f.group)},
          {"lr", f.lr},
          {"momentum", f.momentum},
          {"weight_decay", f.weight_decay},
          {"steps", f.steps},
          {"batch_size", f.batch_size},
          {"clip_norm", f.clip_norm},
          {"schedule", schedule_name(f.schedule)},
          {"seed", f.seed},
          {"eval_every", f.eval_every},
          {"val_fraction", f.val_fraction},
          {"tap", tap_name(f.tap)}};
}

Json to_json(const PlasticityReport& r) {
  Json sites = Json::array();
  for (const SiteSamples& s : r.sites) {
    sites.push_back({{"layer", s.layer},
                     {"kind", component_name(s.kind)},
                     {"count", s.count},
                     {"mean", s.mean},
                     {"std_error", s.std_error},
                     {"min", s.min},
                     {"max", s.max},
                     {"regime", s.amplifying() ? "amplifying" : "contracting"},
                     {"samples", s.samples}});
  }
  return {{"schema", "vitplast.plasticity/1"},
          {"config", config_to_json(r.config)},
          {"mode", probe_mode_name(r.mode)},
          {"seed", r.seed},
          {"num_pairs", r.num_pairs},
          {"rejected_pairs", r.rejected_pairs},
          {"min_discrepancy", r.min_discrepancy},
          {"source_a", r.source_a},
          {"source_b", r.source_b},
          {"kind_means", kind_means_to_json(r.kind_means)},
          {"ranking", kinds_to_json(r.ranking)},
          {"sites", sites}};
}

Json to_json(const BoundReport& r) {
  Json sites = Json::array();
  for (const SiteBound& s : r.sites) {
    Json j = {{"layer", s.layer},
              {"kind", component_name(s.kind)},
              {"formula", formula_name(s.formula)},
              {"value", s.value}};
    if (s.kind == ComponentKind::LN1 || s.kind == ComponentKind::LN2) j["gamma_inf"] = s.gamma_inf;
    if (s.kind == ComponentKind::FC1 || s.kind == ComponentKind::FC2) j["weight_norm"] = s.weight_norm;
    if (s.heads) j["attention_ball"] = mha_to_json(*s.heads);
    if (s.heads_tighter) j["attention_energy"] = mha_to_json(*s.heads_tighter);
    sites.push_back(std::move(j));
  }
  Json order = Json::array();
  for (const auto& o : r.layer_order) order.push_back(kinds_to_json(o));
  return {{"schema", "vitplast.bounds/1"},
          {"config", config_to_json(r.config)},
          {"inputs",
           {{"n", r.inputs.n},
            {"r", r.inputs.r},
            {"sigma_min", r.inputs.sigma_min},
            {"alpha", r.inputs.alpha},
            {"energy", r.inputs.energy},
            {"tighter", r.inputs.tighter},
            {"energy_radius", r.energy_radius}}},
          {"kind_means", kind_means_to_json(r.kind_means)},
          {"ranking", kinds_to_json(r.ranking)},
          {"layer_order", order},
          {"sites", sites}};
}

Json to_json(const TrainLog& log) {
  Json steps = Json::array();
  for (const StepRecord& s : log.steps) {
    steps.push_back({{"step", s.step},
                     {"lr", s.lr},
                     {"loss", s.loss},
                     {"grad_norm", s.grad_norm},
                     {"group_grad_norm", s.group_grad_norm}});
  }
  Json evals = Json::array();
  for (const EvalRecord& e : log.evals) {
    evals.push_back({{"step", e.step}, {"val_loss", e.val_loss}, {"val_accuracy", e.val_accuracy}});
  }
  return {{"schema", "vitplast.trainlog/1"},
          {"config", finetune_config_to_json(log.config)},
          {"trainable_params", log.trainable_params},
          {"steps", steps},
          {"evals", evals},
          {"best_eval", log.best_eval},
          {"best_val_accuracy", log.evals.empty() ? 0.0 : log.evals[log.best_eval].val_accuracy},
          {"test_accuracy", log.test_accuracy}};
}

TrainLog train_log_from_json(const Json& j) {
  if (j.value("schema", "") != "vitplast.trainlog/1") throw FormatError("not a train log");
  TrainLog log;
  const Json& c = j.at("config");
  log.config.group = parse_group(c.at("group").get<std::string>());
  log.config.lr = c.at("lr").get<double>();
  log.config.momentum = c.at("momentum").get<double>();
  log.config.weight_decay = c.at("weight_decay").get<double>();
  log.config.steps = c.at("steps").get<std::size_t>();
  log.config.batch_size = c.at("batch_size").get<std::size_t>();
  log.config.clip_norm = c.at("clip_norm").get<double>();
  log.config.schedule = parse_schedule(c.at("schedule").get<std::string>());
  log.config.seed = c.at("seed").get<std::uint64_t>();
  log.config.eval_every = c.at("eval_every").get<std::size_t>();
  log.config.val_fraction = c.at("val_fraction").get<double>();
  log.config.tap = parse_tap(c.at("tap").get<std::string>());
  log.trainable_params = j.at("trainable_params").get<std::size_t>();
  for (const Json& s : j.at("steps")) {
    log.steps.push_back({s.at("step").get<std::size_t>(), s.at("lr").get<double>(),
                         s.at("loss").get<double>(), s.at("grad_norm").get<double>(),
                         s.at("group_grad_norm").get<double>()});
  }
  for (const Json& e : j.at("evals")) {
    log.evals.push_back({e.at("step").get<std::size_t>(), e.at("val_loss").get<double>(),
                         e.at("val_accuracy").get<double>()});
  }
  log.best_eval = j.at("best_eval").get<std::size_t>();
  log.test_accuracy = j.at("test_accuracy").get<double>();
  return log;
}

std::string dump_json(const Json& j) { return j.dump(2) + "\n"; }

}  // namespace vitplast
