// SPDX-License-Identifier: Apache-2.0
//
// Machine-readable run reports. The JSON is key-ordered and fully
// deterministic for identical invocations except under "timings" and the
// per-check "timing" objects.

#pragma once

#include <fstream>
#include <string>

#include "json.hpp"

#include "srm/checks.hpp"

namespace srm {

constexpr const char* kToolVersion = "0.1.0";

struct RunReport {
  std::string command;
  std::uint64_t seed = 0;
  nlohmann::ordered_json config_echo;
  checks::Suite checks;
  double wall_ms = 0.0;

  void append(const checks::Suite& suite) {
    checks.insert(checks.end(), suite.begin(), suite.end());
  }

  bool failed() const {
    for (const auto& c : checks)
      if (c.status == "fail") return true;
    return false;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["version"] = kToolVersion;
    j["seed"] = seed;
    j["config"] = config_echo;
    j["checks"] = nlohmann::ordered_json::array();
    int pass = 0, fail = 0, warn = 0, skip = 0;
    for (const auto& c : checks) {
      nlohmann::ordered_json e;
      e["name"] = c.name;
      e["status"] = c.status;
      e["metric"] = c.metric;
      if (!c.detail.empty()) e["detail"] = c.detail;
      if (!c.timing.empty()) {
        nlohmann::ordered_json t;
        for (const auto& [k, v] : c.timing) t[k] = v;
        e["timing"] = t;
      }
      j["checks"].push_back(e);
      if (c.status == "pass") ++pass;
      else if (c.status == "fail") ++fail;
      else if (c.status == "warn") ++warn;
      else ++skip;
    }
    j["summary"] = {{"pass", pass}, {"fail", fail}, {"warn", warn}, {"skip", skip}};
    j["timings"] = {{"wall_ms", wall_ms}};
    return j;
  }

  // stdout by default; --out redirects the JSON to a file.
  void emit(const std::string& out_path) const {
    const std::string body = to_json().dump(2) + "\n";
    if (out_path.empty()) {
      std::fputs(body.c_str(), stdout);
    } else {
      std::ofstream f(out_path);
      if (!f) throw ValueError("report: cannot open '" + out_path + "'");
      f << body;
    }
  }
};

}  // namespace srm
