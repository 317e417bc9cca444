#include "mce/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <json.hpp>

#include "mce/errors.hpp"

namespace mce {

namespace {

constexpr char kMagic[4] = {'M', 'C', 'E', 'C'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& out, uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t get_u32(std::istream& in, const std::string& path) {
  uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) throw IoError(path + ": truncated container");
  return v;
}

uint64_t get_u64(std::istream& in, const std::string& path) {
  uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 8)) throw IoError(path + ": truncated container");
  return v;
}

}  // namespace

const Tensor* Container::find(const std::string& name) const {
  for (const auto& [n, t] : arrays) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_container(const std::string& path, const Container& c) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  const std::string meta = nlohmann::json(c.metadata).dump();
  put_u32(out, static_cast<uint32_t>(meta.size()));
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  put_u32(out, static_cast<uint32_t>(c.arrays.size()));
  for (const auto& [name, t] : c.arrays) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) put_u64(out, static_cast<uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  if (!out.good()) throw IoError("short write to " + path);
}

Container load_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError(path + ": not a container file (bad magic)");
  }
  const uint32_t version = get_u32(in, path);
  if (version != kVersion) {
    throw IoError(path + ": unsupported container version " + std::to_string(version));
  }
  Container c;
  const uint32_t meta_len = get_u32(in, path);
  std::string meta(meta_len, '\0');
  if (!in.read(meta.data(), meta_len)) throw IoError(path + ": truncated metadata");
  try {
    c.metadata = nlohmann::json::parse(meta).get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": bad metadata: " + e.what());
  }
  const uint32_t n_arrays = get_u32(in, path);
  for (uint32_t i = 0; i < n_arrays; ++i) {
    const uint32_t name_len = get_u32(in, path);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw IoError(path + ": truncated array name");
    const uint32_t ndim = get_u32(in, path);
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = static_cast<int>(get_u64(in, path));
    Tensor t(shape);
    if (!in.read(reinterpret_cast<char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(double)))) {
      throw IoError(path + ": truncated array data for " + name);
    }
    c.add(name, std::move(t));
  }
  return c;
}

namespace {

Tensor from_eigen_mat(const Eigen::MatrixXd& m) {
  Tensor t({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
  for (int r = 0; r < m.rows(); ++r) {
    for (int c = 0; c < m.cols(); ++c) t.at(r, c) = m(r, c);
  }
  return t;
}

Tensor from_eigen_vec(const Eigen::VectorXd& v) {
  Tensor t({static_cast<int>(v.size())});
  for (int i = 0; i < v.size(); ++i) t[i] = v(i);
  return t;
}

Eigen::MatrixXd to_eigen_mat(const Tensor& t) {
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  for (int r = 0; r < t.dim(0); ++r) {
    for (int c = 0; c < t.dim(1); ++c) m(r, c) = t.at(r, c);
  }
  return m;
}

Eigen::VectorXd to_eigen_vec(const Tensor& t) {
  Eigen::VectorXd v(t.numel());
  for (int i = 0; i < t.numel(); ++i) v(i) = t[i];
  return v;
}

void add_store(Container& c, const std::string& prefix, const ParamStore& store) {
  for (const auto& [name, e] : store.entries()) c.add(prefix + name, e.value);
}

void load_store(const Container& c, const std::string& path, const std::string& prefix,
                ParamStore& store) {
  for (auto& [name, e] : store.entries()) {
    const Tensor* t = c.find(prefix + name);
    if (t == nullptr) throw IoError(path + ": missing array " + prefix + name);
    if (t->shape != e.value.shape) throw IoError(path + ": shape mismatch for " + prefix + name);
    e.value = *t;
  }
}

Arch parse_arch(const std::string& s) {
  if (s == "convnet") return Arch::ConvNet;
  if (s == "mlpnet") return Arch::MlpNet;
  throw IoError("unknown architecture in checkpoint: " + s);
}

}  // namespace

void save_checkpoint(const std::string& path, const MceModel& model, uint64_t seed,
                     uint64_t config_hash) {
  Container c;
  c.metadata["kind"] = "checkpoint";
  c.metadata["num_classes"] = std::to_string(model.num_classes());
  c.metadata["w"] = std::to_string(model.w);
  c.metadata["alpha"] = std::to_string(model.alpha);
  c.metadata["seed"] = std::to_string(seed);
  c.metadata["config_hash"] = std::to_string(config_hash);
  c.metadata["higher_arch"] = model.higher->arch();
  c.metadata["lower_arch"] = model.lower ? model.lower->arch() : "";
  c.add("prior", from_eigen_vec(model.prior.probs));
  add_store(c, "higher.", model.higher->params());
  if (model.lower) add_store(c, "lower.", model.lower->params());
  if (model.frozen_theta_h) {
    c.add("frozen_h.W", from_eigen_mat(model.frozen_theta_h->W));
    c.add("frozen_h.b", from_eigen_vec(model.frozen_theta_h->b));
  }
  if (model.frozen_theta_l) {
    c.add("frozen_l.W", from_eigen_mat(model.frozen_theta_l->W));
    c.add("frozen_l.b", from_eigen_vec(model.frozen_theta_l->b));
  }
  save_container(path, c);
}

MceModel load_checkpoint(const std::string& path) {
  const Container c = load_container(path);
  if (c.metadata.count("kind") == 0 || c.metadata.at("kind") != "checkpoint") {
    throw IoError(path + ": not a model checkpoint");
  }
  const int num_classes = std::stoi(c.metadata.at("num_classes"));
  MceModel model;
  model.w = std::stod(c.metadata.at("w"));
  model.alpha = std::stod(c.metadata.at("alpha"));
  Rng scratch(0);  // initial weights are overwritten below
  model.higher = make_model(parse_arch(c.metadata.at("higher_arch")), num_classes, 0.5, scratch);
  load_store(c, path, "higher.", model.higher->params());
  const std::string lower_arch = c.metadata.at("lower_arch");
  if (!lower_arch.empty()) {
    model.lower = make_model(parse_arch(lower_arch), num_classes, 0.5, scratch);
    load_store(c, path, "lower.", model.lower->params());
  }
  const Tensor* prior = c.find("prior");
  if (prior == nullptr) throw IoError(path + ": missing prior");
  model.prior.probs = to_eigen_vec(*prior);
  model.prior.log_probs = model.prior.probs.array().log();
  if (const Tensor* w = c.find("frozen_h.W")) {
    ResidualAffineParams p;
    p.W = to_eigen_mat(*w);
    p.b = to_eigen_vec(*c.find("frozen_h.b"));
    model.frozen_theta_h = std::move(p);
  }
  if (const Tensor* w = c.find("frozen_l.W")) {
    ResidualAffineParams p;
    p.W = to_eigen_mat(*w);
    p.b = to_eigen_vec(*c.find("frozen_l.b"));
    model.frozen_theta_l = std::move(p);
  }
  return model;
}

namespace {

void add_example_set(Container& c, const std::string& prefix, const ExampleSet& set) {
  c.add(prefix + ".images", set.images);
  const int n = set.size();
  Tensor labels({n}), mods({n}), biased({n}), sources({n});
  for (int i = 0; i < n; ++i) {
    labels[i] = set.labels[static_cast<size_t>(i)];
    mods[i] = set.applied_mod[static_cast<size_t>(i)];
    biased[i] = set.biased[static_cast<size_t>(i)];
    sources[i] = set.mnist_indices[static_cast<size_t>(i)];
  }
  c.add(prefix + ".labels", std::move(labels));
  c.add(prefix + ".applied_mod", std::move(mods));
  c.add(prefix + ".biased", std::move(biased));
  c.add(prefix + ".source_index", std::move(sources));
}

ExampleSet load_example_set(const Container& c, const std::string& path,
                            const std::string& prefix) {
  ExampleSet set;
  const Tensor* images = c.find(prefix + ".images");
  const Tensor* labels = c.find(prefix + ".labels");
  const Tensor* mods = c.find(prefix + ".applied_mod");
  const Tensor* biased = c.find(prefix + ".biased");
  const Tensor* sources = c.find(prefix + ".source_index");
  if (!images || !labels || !mods || !biased || !sources) {
    throw IoError(path + ": bundle is missing arrays for split " + prefix);
  }
  set.images = *images;
  const int n = static_cast<int>(labels->numel());
  for (int i = 0; i < n; ++i) {
    set.labels.push_back(static_cast<int>((*labels)[i]));
    set.applied_mod.push_back(static_cast<int>((*mods)[i]));
    set.biased.push_back(static_cast<uint8_t>((*biased)[i]));
    set.mnist_indices.push_back(static_cast<int>((*sources)[i]));
  }
  return set;
}

}  // namespace

void save_bundle(const std::string& path, const DatasetBundle& bundle) {
  Container c;
  c.metadata["kind"] = "bundle";
  c.metadata["bias"] = bias_name(bundle.bias_kind);
  c.metadata["num_classes"] = std::to_string(bundle.num_classes);
  c.metadata["seed"] = std::to_string(bundle.seed);
  add_example_set(c, "train", bundle.train);
  add_example_set(c, "ood_dev", bundle.ood_dev);
  add_example_set(c, "ood_test", bundle.ood_test);
  add_example_set(c, "id_test", bundle.id_test);
  save_container(path, c);
}

DatasetBundle load_bundle(const std::string& path) {
  const Container c = load_container(path);
  if (c.metadata.count("kind") == 0 || c.metadata.at("kind") != "bundle") {
    throw IoError(path + ": not a dataset bundle");
  }
  DatasetBundle bundle;
  bundle.bias_kind = parse_bias(c.metadata.at("bias"));
  bundle.num_classes = std::stoi(c.metadata.at("num_classes"));
  bundle.seed = std::stoull(c.metadata.at("seed"));
  bundle.train = load_example_set(c, path, "train");
  bundle.ood_dev = load_example_set(c, path, "ood_dev");
  bundle.ood_test = load_example_set(c, path, "ood_test");
  bundle.id_test = load_example_set(c, path, "id_test");
  return bundle;
}

}  // namespace mce
