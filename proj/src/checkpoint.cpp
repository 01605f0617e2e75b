#include "ecglp/checkpoint.hpp"

#include "ecglp/binary_io.hpp"

#include <fstream>
#include <sstream>

namespace ecglp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'E', 'C', 'G', 'L', 'C', 'K', 'P', 'T'};

template <typename S>
constexpr DType dtype_of() {
  return std::is_same_v<S, float> ? DType::kF32 : DType::kF64;
}

}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

ModelConfig Checkpoint::model_config() const {
  if (!meta.contains("model_config")) throw CheckpointError("checkpoint has no model_config");
  ModelConfig c;
  from_json(meta.at("model_config"), c);
  return c;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  std::ostringstream os(std::ios::binary);
  os.write(kMagic, sizeof(kMagic));
  io::write_le<std::uint32_t>(os, kCheckpointVersion);
  io::write_string(os, ckpt.meta.dump());
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    io::write_string(os, t.name);
    io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype));
    io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(t.value.rows()));
    io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(t.value.cols()));
    for (Index i = 0; i < t.value.size(); ++i) {
      if (t.dtype == DType::kF32) {
        io::write_le<float>(os, static_cast<float>(t.value.data()[i]));
      } else {
        io::write_le<double>(os, t.value.data()[i]);
      }
    }
  }
  std::string bytes = os.str();
  const auto sum = fnv1a64(bytes);

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    io::write_le<std::uint64_t>(out, sum);
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kMagic) + 4 + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("corrupt checkpoint " + path.string() + ": bad magic or truncated");
  }
  const std::string body = bytes.substr(0, bytes.size() - 8);
  std::istringstream tail(bytes.substr(bytes.size() - 8));
  if (io::read_le<std::uint64_t>(tail) != fnv1a64(body)) {
    throw CheckpointError("corrupt checkpoint " + path.string() + ": checksum mismatch");
  }

  std::istringstream is(body);
  is.ignore(sizeof(kMagic));
  Checkpoint ckpt;
  try {
    const auto version = io::read_le<std::uint32_t>(is);
    if (version != kCheckpointVersion) {
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    }
    ckpt.meta = json::parse(io::read_string(is));
    const auto count = io::read_le<std::uint32_t>(is);
    for (std::uint32_t n = 0; n < count; ++n) {
      NamedTensor t;
      t.name = io::read_string(is, 4096);
      const auto dt = io::read_le<std::uint8_t>(is);
      if (dt > 1) throw CheckpointError("unknown dtype in tensor " + t.name);
      t.dtype = static_cast<DType>(dt);
      const auto rows = io::read_le<std::uint64_t>(is);
      const auto cols = io::read_le<std::uint64_t>(is);
      if (rows * cols > body.size()) throw CheckpointError("tensor " + t.name + " larger than the file");
      t.value.resize(static_cast<Index>(rows), static_cast<Index>(cols));
      for (Index i = 0; i < t.value.size(); ++i) {
        t.value.data()[i] = t.dtype == DType::kF32 ? static_cast<double>(io::read_le<float>(is)) : io::read_le<double>(is);
      }
      ckpt.tensors.push_back(std::move(t));
    }
  } catch (const io::FormatError& e) {
    throw CheckpointError("corrupt checkpoint " + path.string() + ": " + e.what());
  } catch (const json::exception& e) {
    throw CheckpointError("corrupt checkpoint metadata in " + path.string() + ": " + e.what());
  }
  return ckpt;
}

template <typename S>
Checkpoint make_checkpoint(const Model<S>& model, const AdamW<S>* optimizer, json meta) {
  Checkpoint ckpt;
  ckpt.meta = std::move(meta);
  ckpt.meta["model_config"] = model.config();
  ckpt.meta["config_hash"] = config_hash(model.config());
  for (const auto& p : model.parameters().tensors()) {
    ckpt.tensors.push_back({"param/" + p.name(), dtype_of<S>(), p.value().template cast<double>()});
  }
  if (optimizer) {
    ckpt.meta["optimizer_step"] = optimizer->step_count();
    const auto& params = optimizer->params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      ckpt.tensors.push_back({"adam.m/" + params[i].name(), dtype_of<S>(), optimizer->first_moments()[i].template cast<double>()});
      ckpt.tensors.push_back({"adam.v/" + params[i].name(), dtype_of<S>(), optimizer->second_moments()[i].template cast<double>()});
    }
  }
  return ckpt;
}

namespace {

template <typename S>
void assign(Tensor<S>& target, const NamedTensor& t) {
  if (t.value.rows() != target.rows() || t.value.cols() != target.cols()) {
    throw CheckpointError("shape mismatch for " + t.name);
  }
  target.mutable_value() = t.value.cast<S>();
}

}  // namespace

template <typename S>
void restore_parameters(Model<S>& model, const Checkpoint& ckpt) {
  const std::string mine = config_hash(model.config());
  const std::string theirs = ckpt.meta.value("config_hash", std::string("<none>"));
  if (mine != theirs) {
    throw CheckpointError("config hash mismatch: checkpoint has " + theirs + ", model has " + mine);
  }
  for (auto& p : model.parameters().tensors()) {
    const auto* t = ckpt.find("param/" + p.name());
    if (!t) throw CheckpointError("checkpoint is missing parameter " + p.name());
    assign(p, *t);
  }
}

template <typename S>
void restore_optimizer(AdamW<S>& optimizer, const Checkpoint& ckpt) {
  const auto& params = optimizer.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* m = ckpt.find("adam.m/" + params[i].name());
    const auto* v = ckpt.find("adam.v/" + params[i].name());
    if (!m || !v) throw CheckpointError("checkpoint is missing optimizer state for " + params[i].name());
    optimizer.first_moments()[i] = m->value.template cast<S>();
    optimizer.second_moments()[i] = v->value.template cast<S>();
  }
  optimizer.set_step_count(ckpt.meta.value("optimizer_step", 0L));
}

template <typename S>
int copy_text_encoder(Model<S>& model, const Checkpoint& ckpt) {
  int copied = 0;
  for (auto& p : model.parameters().tensors()) {
    if (!model.is_text_encoder_param(p.name())) continue;
    const auto* t = ckpt.find("param/" + p.name());
    if (!t) throw CheckpointError("text checkpoint is missing " + p.name());
    assign(p, *t);
    ++copied;
  }
  if (copied == 0) throw CheckpointError("no text-encoder parameters copied");
  return copied;
}

template Checkpoint make_checkpoint<float>(const Model<float>&, const AdamW<float>*, json);
template Checkpoint make_checkpoint<double>(const Model<double>&, const AdamW<double>*, json);
template void restore_parameters<float>(Model<float>&, const Checkpoint&);
template void restore_parameters<double>(Model<double>&, const Checkpoint&);
template void restore_optimizer<float>(AdamW<float>&, const Checkpoint&);
template void restore_optimizer<double>(AdamW<double>&, const Checkpoint&);
template int copy_text_encoder<float>(Model<float>&, const Checkpoint&);
template int copy_text_encoder<double>(Model<double>&, const Checkpoint&);

}  // namespace ecglp
