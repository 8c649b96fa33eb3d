#include "tg/logits.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include "tg/tensor.hpp"

namespace tg {

namespace {

auto key_of(const LogitRecord& r) {
  return std::tie(r.video_id, r.model_id, r.variant, r.stride, r.input_mode);
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw ShapeError("logits: bad number '" + s + "' in " + what);
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

}  // namespace

bool record_less(const LogitRecord& a, const LogitRecord& b) { return key_of(a) < key_of(b); }

std::string format_logit_line(const LogitRecord& r) {
  std::string line = r.video_id + '\t' + r.model_id + '\t' + r.variant + '\t' + std::to_string(r.stride) +
                     '\t' + r.input_mode + '\t' + fmt17(r.weight);
  for (double v : r.logits) line += '\t' + fmt17(v);
  return line;
}

void write_logits(std::vector<LogitRecord> records, const std::string& path, bool append) {
  if (append) {
    std::ifstream probe(path);
    if (probe && probe.peek() != std::char_traits<char>::eof()) {
      std::vector<LogitRecord> merged = read_logits(path);
      for (LogitRecord& r : records) {
        auto it = std::find_if(merged.begin(), merged.end(),
                               [&](const LogitRecord& m) { return key_of(m) == key_of(r); });
        if (it != merged.end()) *it = std::move(r);
        else merged.push_back(std::move(r));
      }
      records = std::move(merged);
    }
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open logit file for writing: " + path);
  if (records.empty()) return;
  const std::size_t k = records.front().logits.size();
  for (const LogitRecord& r : records) {
    if (r.logits.size() != k) {
      throw ShapeError("logits: record for '" + r.video_id + "' has " + std::to_string(r.logits.size()) +
                       " classes, expected " + std::to_string(k));
    }
  }
  std::sort(records.begin(), records.end(), record_less);
  os << "#TGLOGITS 1 " << k << '\n';
  for (const LogitRecord& r : records) os << format_logit_line(r) << '\n';
  if (!os) throw std::runtime_error("failed writing logit file: " + path);
}

std::vector<LogitRecord> read_logits(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open logit file: " + path);
  std::vector<LogitRecord> out;
  std::string line;
  if (!std::getline(is, line)) return out;
  std::size_t k = 0;
  {
    std::istringstream h(line);
    std::string tag;
    int version = 0;
    if (!(h >> tag >> version >> k) || tag != "#TGLOGITS" || version != 1) {
      throw ShapeError("logits: bad header in " + path);
    }
  }
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split(line, '\t');
    const std::string where = path + ":" + std::to_string(lineno);
    if (f.size() != 6 + k) {
      throw ShapeError("logits: " + where + " has " + std::to_string(f.size()) + " fields, expected " +
                       std::to_string(6 + k));
    }
    LogitRecord r;
    r.video_id = f[0];
    r.model_id = f[1];
    r.variant = f[2];
    r.stride = static_cast<int>(parse_double(f[3], where));
    r.input_mode = f[4];
    r.weight = parse_double(f[5], where);
    for (std::size_t i = 0; i < k; ++i) r.logits.push_back(parse_double(f[6 + i], where));
    out.push_back(std::move(r));
  }
  return out;
}

EnsembleSpec EnsembleSpec::parse(const std::string& text) {
  EnsembleSpec spec;
  std::string norm = text;
  std::replace(norm.begin(), norm.end(), ',', '+');
  for (const std::string& raw : split(norm, '+')) {
    const std::string term = trim(raw);
    if (term.empty()) continue;
    EnsembleMember m;
    std::string body = term;
    if (const auto star = term.find('*'); star != std::string::npos) {
      body = trim(term.substr(0, star));
      const std::string mult = trim(term.substr(star + 1));
      if (mult.empty() || mult.find_first_not_of("0123456789") != std::string::npos || std::stoi(mult) < 1) {
        throw ShapeError("ensemble spec: multiplicity in '" + term + "' must be a positive integer");
      }
      m.multiplicity = std::stoi(mult);
    }
    const auto parts = split(body, ':');
    if (parts.size() < 2 || parts.size() > 3 || trim(parts[0]).empty() || trim(parts[1]).empty()) {
      throw ShapeError("ensemble spec: expected model:variant[:stride][*mult], got '" + term + "'");
    }
    m.model_id = trim(parts[0]);
    m.variant = trim(parts[1]);
    if (parts.size() == 3) {
      const std::string s = trim(parts[2]);
      if (s != "1" && s != "2") throw ShapeError("ensemble spec: stride must be 1 or 2 in '" + term + "'");
      m.stride = std::stoi(s);
    }
    spec.members.push_back(m);
  }
  if (spec.members.empty()) throw ShapeError("ensemble spec: no members");
  return spec;
}

std::string EnsembleSpec::str() const {
  std::string out;
  for (const EnsembleMember& m : members) {
    if (!out.empty()) out += '+';
    out += m.model_id + ':' + m.variant + ':' + std::to_string(m.stride) + '*' + std::to_string(m.multiplicity);
  }
  return out;
}

EnsembleResult ensemble(const EnsembleSpec& spec, const std::vector<LogitRecord>& records,
                        const std::vector<std::pair<std::string, int>>& labels) {
  if (spec.members.empty()) throw ShapeError("ensemble: no members");
  // Merge repeated keys, then canonicalise.
  std::map<std::tuple<std::string, std::string, int>, long long> weights;
  for (const EnsembleMember& m : spec.members) {
    if (m.multiplicity < 1) throw ShapeError("ensemble: multiplicity must be >= 1");
    weights[{m.model_id, m.variant, m.stride}] += m.multiplicity;
  }
  long long g = 0;
  for (const auto& [key, w] : weights) g = std::gcd(g, w);
  long long total = 0;
  for (auto& [key, w] : weights) total += (w /= g);

  std::map<std::tuple<std::string, std::string, std::string, int>, const LogitRecord*> index;
  for (const LogitRecord& r : records) index[{r.video_id, r.model_id, r.variant, r.stride}] = &r;

  std::vector<std::pair<std::string, int>> sorted_labels = labels;
  std::sort(sorted_labels.begin(), sorted_labels.end());
  if (sorted_labels.empty()) throw ShapeError("ensemble: no videos to fuse");

  EnsembleResult result;
  std::vector<int> truth;
  for (const auto& [video, label] : sorted_labels) {
    std::vector<std::pair<const LogitRecord*, long long>> parts;
    for (const auto& [key, w] : weights) {
      const auto& [model, variant, stride] = key;
      auto it = index.find({video, model, variant, stride});
      if (it == index.end()) {
        throw ShapeError("ensemble: missing logits for video '" + video + "', model '" + model +
                         "', variant '" + variant + "' stride " + std::to_string(stride));
      }
      parts.emplace_back(it->second, w);
    }
    const std::size_t k = parts[0].first->logits.size();
    LogitRecord fused;
    fused.video_id = video;
    fused.model_id = "ensemble";
    fused.variant = "fused";
    fused.stride = 0;
    fused.weight = static_cast<double>(total);
    // mean taken relative to the first member so identical inputs come back exactly
    const std::vector<double>& ref = parts[0].first->logits;
    fused.logits.assign(k, 0.0);
    std::string mode = parts[0].first->input_mode;
    for (const auto& [rec, w] : parts) {
      if (rec->logits.size() != k) throw ShapeError("ensemble: class-count mismatch for video '" + video + "'");
      if (rec->input_mode != mode) mode = "mixed";
      for (std::size_t j = 0; j < k; ++j) fused.logits[j] += static_cast<double>(w) * (rec->logits[j] - ref[j]);
    }
    for (std::size_t j = 0; j < k; ++j) fused.logits[j] = ref[j] + fused.logits[j] / static_cast<double>(total);
    fused.input_mode = mode;
    result.predictions.push_back(argmax(fused.logits));
    truth.push_back(label);
    result.fused.push_back(std::move(fused));
  }
  result.accuracy = accuracy(result.predictions, truth);
  return result;
}

int argmax(const std::vector<double>& v) {
  if (v.empty()) throw ShapeError("argmax of empty vector");
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::vector<double> softmax(const std::vector<double>& v) {
  if (v.empty()) return {};
  const double m = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) z += (out[i] = std::exp(v[i] - m));
  for (double& e : out) e /= z;
  return out;
}

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size()) {
    throw ShapeError("accuracy: " + std::to_string(predictions.size()) + " predictions vs " +
                     std::to_string(labels.size()) + " labels");
  }
  if (predictions.empty()) throw ShapeError("accuracy: no predictions");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

}  // namespace tg
