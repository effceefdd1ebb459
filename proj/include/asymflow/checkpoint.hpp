#pragma once

// Checkpoint file: "AFCK", u32 header length, JSON header, then one AFMX payload per tensor
// in header order.

#include <bit>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"

#include "asymflow/afmx.hpp"
#include "asymflow/error.hpp"
#include "asymflow/train.hpp"

namespace asymflow {

using Json = nlohmann::json;

inline Json to_json(const NetConfig& c) {
  return Json{{"dim", c.dim},
              {"hidden", c.hidden},
              {"depth", c.depth},
              {"time_freqs", c.time_freqs},
              {"num_classes", c.num_classes},
              {"zero_head", c.zero_head}};
}

inline NetConfig net_config_from_json(const Json& j) {
  NetConfig c;
  c.dim = j.at("dim").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.depth = j.at("depth").get<std::size_t>();
  c.time_freqs = j.at("time_freqs").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.zero_head = j.at("zero_head").get<bool>();
  return c;
}

namespace detail {

inline std::string hex_bits(double v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(v)));
  return buf;
}

inline double from_hex_bits(const std::string& s) {
  return std::bit_cast<double>(static_cast<std::uint64_t>(std::stoull(s, nullptr, 16)));
}

inline Matrix row_matrix(std::span<const double> v) {
  return Matrix(1, v.size(), Vector(v.begin(), v.end()));
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const TrainState& st,
                            const Json& run_config = Json::object()) {
  const RngState& rs = st.rng.state();
  Json h;
  h["format"] = "asymflow-checkpoint";
  h["version"] = 1;
  h["net"] = to_json(st.model.net.config());
  h["step"] = st.step;
  h["adam_step"] = st.adam.step;
  h["rng"] = {{"s", {rs.s[0], rs.s[1], rs.s[2], rs.s[3]}},
              {"has_spare", rs.has_spare},
              {"spare", detail::hex_bits(rs.spare)}};
  h["basis"] = {{"provenance", std::string(to_string(st.model.basis.provenance()))},
                {"D", st.model.basis.dim()},
                {"r", st.model.basis.rank()}};
  h["s"] = detail::hex_bits(st.model.cal.s);
  h["sigma_min"] = detail::hex_bits(st.model.clamp.sigma_min);
  h["config"] = run_config;
  h["tensors"] = {"params", "ema", "adam_m", "adam_v", "basis"};

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  const std::string header = h.dump();
  os.write("AFCK", 4);
  afmx::detail::put_u32(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  afmx::write(os, detail::row_matrix(st.model.net.params()));
  afmx::write(os, detail::row_matrix(st.ema.params()));
  afmx::write(os, detail::row_matrix(st.adam.m));
  afmx::write(os, detail::row_matrix(st.adam.v));
  afmx::write(os, st.model.basis.A());
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

struct LoadedCheckpoint {
  TrainState state;
  Json config;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "AFCK") throw IoError("'" + path.string() + "' is not a checkpoint");
  const std::uint32_t len = afmx::detail::get_u32(is);
  std::string header(len, '\0');
  is.read(header.data(), len);
  if (!is) throw IoError("truncated checkpoint header");
  const Json h = Json::parse(header);

  const NetConfig nc = net_config_from_json(h.at("net"));
  VelocityNet net(nc);
  VelocityNet ema(nc);
  const auto load_into = [&](std::span<double> dst, const char* name) {
    const Matrix m = afmx::read(is);
    if (m.size() != dst.size()) throw IoError(std::string("checkpoint tensor '") + name + "' has wrong size");
    std::copy(m.data().begin(), m.data().end(), dst.begin());
  };
  load_into(net.params(), "params");
  load_into(ema.params(), "ema");
  AdamState adam(net.num_params());
  load_into(adam.m, "adam_m");
  load_into(adam.v, "adam_v");
  adam.step = h.at("adam_step").get<std::uint64_t>();
  Matrix a = afmx::read(is);
  const Provenance prov = provenance_from_string(h.at("basis").at("provenance").get<std::string>());
  SubspaceBasis basis(std::move(a), prov);

  RngState rs;
  const Json& jr = h.at("rng");
  for (std::size_t i = 0; i < 4; ++i) rs.s[i] = jr.at("s").at(i).get<std::uint64_t>();
  rs.has_spare = jr.at("has_spare").get<bool>();
  rs.spare = detail::from_hex_bits(jr.at("spare").get<std::string>());
  Rng rng;
  rng.set_state(rs);

  LoadedCheckpoint out{
      TrainState{AsymModel{std::move(net), std::move(basis),
                           Calibration(detail::from_hex_bits(h.at("s").get<std::string>())),
                           ClampPolicy{detail::from_hex_bits(h.at("sigma_min").get<std::string>())}},
                 std::move(ema), std::move(adam), rng, h.at("step").get<std::size_t>()},
      h.value("config", Json::object())};
  return out;
}

}  // namespace asymflow
