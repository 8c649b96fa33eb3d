#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tg {

/// Averaged pre-softmax scores of one model under one test-time variant.
struct LogitRecord {
  std::string video_id;
  std::string model_id;
  std::string variant;     // kebab-case variant name
  int stride = 1;
  std::string input_mode;  // rgb | diff; fused records over both say mixed
  double weight = 1.0;
  std::vector<double> logits;

  bool operator==(const LogitRecord&) const = default;
};

/// Orders by (video_id, model_id, variant, stride, input_mode).
bool record_less(const LogitRecord& a, const LogitRecord& b);

/// Writes header and records sorted. With append, records already in the file
/// are merged in (a record with the same key is replaced) and the file is
/// rewritten in sorted order. An empty list without append gives an empty file.
void write_logits(std::vector<LogitRecord> records, const std::string& path, bool append = false);
std::vector<LogitRecord> read_logits(const std::string& path);

std::string format_logit_line(const LogitRecord& r);

/// One ensemble member: a (model, variant, stride) key with an integer weight.
struct EnsembleMember {
  std::string model_id;
  std::string variant;
  int stride = 1;
  int multiplicity = 1;

  bool operator==(const EnsembleMember&) const = default;
};

struct EnsembleSpec {
  std::vector<EnsembleMember> members;

  /// "model:variant[:stride][*mult]" terms joined by '+' or ','.
  static EnsembleSpec parse(const std::string& text);
  std::string str() const;
};

struct EnsembleResult {
  std::vector<LogitRecord> fused;  // one per video, sorted by video id
  std::vector<int> predictions;
  double accuracy = 0.0;
};

/// fused(video) = sum(m_i * logits_i) / sum(m_i). Multiplicities are reduced
/// by their gcd and members are visited in canonical order, so the result does
/// not depend on member order or a common scale. Labels are looked up by video
/// id; every member must be present for every labelled video.
EnsembleResult ensemble(const EnsembleSpec& spec, const std::vector<LogitRecord>& records,
                        const std::vector<std::pair<std::string, int>>& labels);

int argmax(const std::vector<double>& v);
std::vector<double> softmax(const std::vector<double>& v);
double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels);

}  // namespace tg
