#include <cstdio>
#include <fstream>
#include <sstream>

#include "tg/binio.hpp"
#include "tg/models.hpp"

namespace tg {

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void put_record(std::ostream& os, const ArrayRecord& r) {
  binio::put_string(os, r.name);
  binio::put_u32(os, static_cast<std::uint32_t>(r.shape.size()));
  for (Index e : r.shape) binio::put_u32(os, static_cast<std::uint32_t>(e));
  for (double v : r.values) binio::put_f64(os, v);
}

ArrayRecord get_record(std::istream& is) {
  ArrayRecord r;
  r.name = binio::get_string(is);
  const std::uint32_t rank = binio::get_u32(is);
  if (rank > 8) throw binio::FormatError("checkpoint: implausible rank for '" + r.name + "'");
  for (std::uint32_t i = 0; i < rank; ++i) r.shape.push_back(binio::get_u32(is));
  const Index n = numel_of(r.shape);
  r.values.resize(static_cast<std::size_t>(n));
  for (double& v : r.values) v = binio::get_f64(is);
  return r;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Checkpoint make_checkpoint(const Model& model, int epoch, std::uint64_t rng_seed,
                           std::map<std::string, std::string> extra) {
  Checkpoint c;
  c.config = model.config();
  c.epoch = epoch;
  c.rng_seed = rng_seed;
  c.extra = std::move(extra);
  for (const Parameter& p : model.parameters()) {
    c.parameters.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
    if (!p.momentum.empty()) c.momentum.push_back({p.name, p.tensor.shape(), p.momentum});
  }
  for (const NamedBuffer& b : model.buffers()) {
    c.buffers.push_back({b.name, b.tensor.shape(), {b.tensor.data().begin(), b.tensor.data().end()}});
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ostringstream text;
  text << "format_version = " << ckpt.format_version << '\n';
  text << "config_hash = " << hex64(ckpt.config.config_hash()) << '\n';
  text << "epoch = " << ckpt.epoch << '\n';
  text << "rng_seed = " << ckpt.rng_seed << '\n';
  text << "num_parameters = " << ckpt.parameters.size() << '\n';
  text << "num_buffers = " << ckpt.buffers.size() << '\n';
  text << "num_momentum = " << ckpt.momentum.size() << '\n';
  for (const auto& [k, v] : ckpt.extra) text << "extra." << k << " = " << v << '\n';
  text << ckpt.config.to_text();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os.write(kCheckpointMagic, 8);
  binio::put_string(os, text.str());
  for (const ArrayRecord& r : ckpt.parameters) put_record(os, r);
  for (const ArrayRecord& r : ckpt.buffers) put_record(os, r);
  for (const ArrayRecord& r : ckpt.momentum) put_record(os, r);
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  binio::expect_magic(is, kCheckpointMagic, "checkpoint " + path);
  std::istringstream text(binio::get_string(is));

  Checkpoint c;
  std::string stored_hash;
  std::size_t np = 0, nb = 0, nm = 0;
  std::string line;
  while (std::getline(text, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key == "format_version") c.format_version = std::stoi(value);
    else if (key == "config_hash") stored_hash = value;
    else if (key == "epoch") c.epoch = std::stoi(value);
    else if (key == "rng_seed") c.rng_seed = std::stoull(value);
    else if (key == "num_parameters") np = std::stoull(value);
    else if (key == "num_buffers") nb = std::stoull(value);
    else if (key == "num_momentum") nm = std::stoull(value);
    else if (key.rfind("extra.", 0) == 0) c.extra[key.substr(6)] = value;
    else if (!c.config.set_field(key, value)) {
      throw binio::FormatError("checkpoint: unknown header key '" + key + "'");
    }
  }
  if (c.format_version != kCheckpointVersion) {
    throw binio::FormatError("checkpoint: unsupported format version " +
                             std::to_string(c.format_version));
  }
  if (stored_hash != hex64(c.config.config_hash())) {
    throw binio::FormatError("checkpoint: config hash mismatch (stored " + stored_hash +
                             ", computed " + hex64(c.config.config_hash()) + ")");
  }
  for (std::size_t i = 0; i < np; ++i) c.parameters.push_back(get_record(is));
  for (std::size_t i = 0; i < nb; ++i) c.buffers.push_back(get_record(is));
  for (std::size_t i = 0; i < nm; ++i) c.momentum.push_back(get_record(is));
  if (is.peek() != std::char_traits<char>::eof()) {
    throw binio::FormatError("checkpoint: trailing bytes after last record");
  }
  return c;
}

void restore_checkpoint(Model& model, const Checkpoint& ckpt) {
  if (model.config().config_hash() != ckpt.config.config_hash()) {
    throw ShapeError("checkpoint config hash " + hex64(ckpt.config.config_hash()) +
                     " does not match model config hash " + hex64(model.config().config_hash()));
  }
  auto& params = model.parameters();
  if (params.size() != ckpt.parameters.size()) {
    throw ShapeError("checkpoint has " + std::to_string(ckpt.parameters.size()) +
                     " parameters, model has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ArrayRecord& r = ckpt.parameters[i];
    if (r.name != params[i].name || r.shape != params[i].tensor.shape()) {
      throw ShapeError("checkpoint parameter '" + r.name + "' " + shape_str(r.shape) +
                       " does not match model parameter '" + params[i].name + "' " +
                       shape_str(params[i].tensor.shape()));
    }
    std::copy(r.values.begin(), r.values.end(), params[i].tensor.mutable_data().begin());
    params[i].momentum.clear();
  }
  for (const ArrayRecord& r : ckpt.momentum) model.parameter(r.name).momentum = r.values;
  auto& bufs = model.buffers();
  if (bufs.size() != ckpt.buffers.size()) throw ShapeError("checkpoint buffer count mismatch");
  for (std::size_t i = 0; i < bufs.size(); ++i) {
    if (bufs[i].name != ckpt.buffers[i].name) {
      throw ShapeError("checkpoint buffer '" + ckpt.buffers[i].name + "' does not match '" +
                       bufs[i].name + "'");
    }
    std::copy(ckpt.buffers[i].values.begin(), ckpt.buffers[i].values.end(),
              bufs[i].tensor.mutable_data().begin());
  }
}

std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt) {
  auto model = build_model(ckpt.config, ckpt.rng_seed);
  restore_checkpoint(*model, ckpt);
  return model;
}

}  // namespace tg
