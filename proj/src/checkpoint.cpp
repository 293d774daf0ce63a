#include "sdevi/errors.hpp"
#include "sdevi/trainer.hpp"

#include <nlohmann/json.hpp>

namespace sdevi {

namespace {

using nlohmann::json;

json net_json(const std::string& name, const DenseNet& net) {
  json j;
  j["name"] = name;
  j["dims"] = net.dims();
  json weights = json::array();
  json biases = json::array();
  for (const DenseLayer& l : net.layers()) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(l.weight.size()));
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) w.push_back(l.weight(r, c));
    }
    weights.push_back(std::move(w));
    biases.push_back(std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size()));
  }
  j["weights"] = std::move(weights);
  j["biases"] = std::move(biases);
  return j;
}

DenseNet net_from_json(const json& j) {
  const auto dims = j.at("dims").get<std::vector<Eigen::Index>>();
  const json& weights = j.at("weights");
  const json& biases = j.at("biases");
  if (dims.size() != 4 || weights.size() != 3 || biases.size() != 3) {
    throw CheckpointError("network '" + j.value("name", std::string("?")) + "' must have three layers");
  }
  std::vector<DenseLayer> layers;
  for (std::size_t l = 0; l < 3; ++l) {
    const Eigen::Index in = dims[l];
    const Eigen::Index out = dims[l + 1];
    const auto w = weights[l].get<std::vector<double>>();
    const auto b = biases[l].get<std::vector<double>>();
    if (static_cast<Eigen::Index>(w.size()) != in * out || static_cast<Eigen::Index>(b.size()) != out) {
      throw CheckpointError("network '" + j.value("name", std::string("?")) + "' layer " + std::to_string(l) +
                            " has the wrong number of values");
    }
    DenseLayer layer{Eigen::MatrixXd(out, in), Eigen::MatrixXd(out, 1)};
    for (Eigen::Index r = 0; r < out; ++r) {
      for (Eigen::Index c = 0; c < in; ++c) layer.weight(r, c) = w[static_cast<std::size_t>(r * in + c)];
      layer.bias(r, 0) = b[static_cast<std::size_t>(r)];
    }
    layers.push_back(std::move(layer));
  }
  return DenseNet::from_layers(std::move(layers));
}

}  // namespace

std::string checkpoint_text(const Checkpoint& ckpt) {
  const SdeModel& m = ckpt.model;
  json j;
  j["version"] = kCheckpointVersion;
  j["driver"] = to_string(m.driver);
  j["variant"] = to_string(m.variant);
  j["linear_frozen"] = m.linear_frozen;
  j["linear"] = {{"lambda", m.linear.lambda}, {"eta", m.linear.eta}, {"varsigma", m.linear.varsigma},
                 {"x0", m.linear.x0}};
  if (m.mafbm) {
    const MafbmDriver& md = *m.mafbm;
    j["mafbm"] = {{"hurst", md.config.hurst},
                  {"k", md.config.k_factors},
                  {"horizon", md.config.horizon},
                  {"gammas", md.config.gammas},
                  {"omegas", std::vector<double>(md.weights.omegas.data(),
                                                 md.weights.omegas.data() + md.weights.omegas.size())},
                  {"max_rel_error", md.weights.max_rel_error}};
  } else {
    j["mafbm"] = nullptr;
  }
  json nets = json::array();
  if (m.has_nets()) {
    nets.push_back(net_json("drift", m.drift_net));
    nets.push_back(net_json("diffusion", m.diff_net));
    nets.push_back(net_json("control", m.control_net));
    nets.push_back(net_json("encoder", m.encoder));
  }
  j["nets"] = std::move(nets);
  j["data_norm"] = {{"mean", ckpt.norm_mean}, {"sd", ckpt.norm_sd}};
  return j.dump(1) + "\n";
}

Checkpoint checkpoint_from_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
  try {
    if (!j.contains("version") || !j.at("version").is_number_integer()) {
      throw CheckpointError("checkpoint has no integer version field");
    }
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint c;
    SdeModel& m = c.model;
    m.driver = parse_driver(j.at("driver").get<std::string>());
    m.variant = parse_variant(j.at("variant").get<std::string>());
    m.linear_frozen = j.at("linear_frozen").get<bool>();
    const json& lin = j.at("linear");
    m.linear = {lin.at("lambda").get<double>(), lin.at("eta").get<double>(), lin.at("varsigma").get<double>(),
                lin.at("x0").get<double>()};
    if (!j.at("mafbm").is_null()) {
      const json& mj = j.at("mafbm");
      MafbmDriver md;
      md.config.hurst = mj.at("hurst").get<double>();
      md.config.k_factors = mj.at("k").get<int>();
      md.config.horizon = mj.at("horizon").get<double>();
      md.config.gammas = mj.at("gammas").get<std::vector<double>>();
      const auto om = mj.at("omegas").get<std::vector<double>>();
      md.weights.omegas = Eigen::Map<const Eigen::VectorXd>(om.data(), static_cast<Eigen::Index>(om.size()));
      md.weights.max_rel_error = mj.at("max_rel_error").get<double>();
      m.mafbm = std::move(md);
    }
    for (const json& nj : j.at("nets")) {
      const std::string name = nj.at("name").get<std::string>();
      DenseNet net = net_from_json(nj);
      if (name == "drift") {
        m.drift_net = std::move(net);
      } else if (name == "diffusion") {
        m.diff_net = std::move(net);
      } else if (name == "control") {
        m.control_net = std::move(net);
      } else if (name == "encoder") {
        m.encoder = std::move(net);
      } else {
        throw CheckpointError("unknown network '" + name + "'");
      }
    }
    c.norm_mean = j.at("data_norm").at("mean").get<double>();
    c.norm_sd = j.at("data_norm").at("sd").get<double>();
    m.validate();
    return c;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  } catch (const PreconditionError& e) {
    throw CheckpointError(std::string("invalid checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_text_file(path, checkpoint_text(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const DataError& e) {
    throw CheckpointError(e.what());
  }
  return checkpoint_from_text(text);
}

}  // namespace sdevi
