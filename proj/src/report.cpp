#include <cstdio>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "alignforge/common.hpp"
#include "alignforge/eval.hpp"

namespace alignforge::eval {

using nlohmann::json;

MetricReport build_report(const ReportInputs& inputs) {
  if (inputs.doctor_references.size() != inputs.modified_references.size()) {
    throw UsageError("doctor and modified reference lists differ in length");
  }
  MetricReport report;
  std::map<std::string, std::map<std::string, int>> wins;  // dimension -> method -> wins
  std::map<std::string, std::set<std::string>> entered;    // dimension -> candidates
  for (const auto& ballot : inputs.ballots) {
    if (!ballot.winner) continue;
    const std::string dim(to_string(ballot.dimension));
    for (const auto& c : ballot.candidates) entered[dim].insert(c);
    ++report.ballots_counted[dim];
    ++wins[dim][*ballot.winner];
  }

  for (const auto& method : inputs.methods) {
    MethodRow row;
    row.method = method;
    const auto it = inputs.responses.find(method);
    row.present = it != inputs.responses.end() && !it->second.empty() &&
                  it->second.size() == inputs.doctor_references.size();
    if (row.present) {
      row.doctor = score_responses(it->second, inputs.doctor_references);
      row.modified = score_responses(it->second, inputs.modified_references);
    }
    if (const auto s = inputs.intensity.find(method); s != inputs.intensity.end()) {
      row.intensity = s->second;
    }
    for (const auto& [dim, counted] : report.ballots_counted) {
      if (!entered[dim].count(method)) continue;
      const auto& by_method = wins[dim];
      const auto w = by_method.find(method);
      row.preference_share[dim] = 100.0 * (w == by_method.end() ? 0 : w->second) / counted;
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols = {
      "method", "present",
      "doctor_bleu", "doctor_bleu1", "doctor_rouge1", "doctor_rouge2", "doctor_rougeL",
      "modified_bleu", "modified_bleu1", "modified_rouge1", "modified_rouge2", "modified_rougeL",
      "empathetic", "comforting", "reassuring", "mean", "max", "judge_parse_failure",
      "knowledgeable_share", "emotional_share", "knowledgeable_ballots", "emotional_ballots"};
  return cols;
}

std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else {
      fields.back() += c;
    }
  }
  return fields;
}

double parse_double(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw DataError("");
    return v;
  } catch (const std::exception&) {
    throw DataError("report: bad number '" + s + "'");
  }
}

}  // namespace

std::string report_to_csv(const MetricReport& report) {
  std::ostringstream out;
  const auto& cols = csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << "\n";
  auto ballots = [&](const char* dim) {
    const auto it = report.ballots_counted.find(dim);
    return it == report.ballots_counted.end() ? std::string() : std::to_string(it->second);
  };
  for (const auto& row : report.rows) {
    std::vector<std::string> f = {csv_field(row.method), row.present ? "1" : "0"};
    for (const MetricRow* m : {&row.doctor, &row.modified}) {
      for (double v : {m->bleu, m->bleu1, m->rouge1, m->rouge2, m->rougeL}) {
        f.push_back(row.present ? exact(v) : "");
      }
    }
    if (row.intensity) {
      const auto& s = *row.intensity;
      for (double v : {s.empathetic, s.comforting, s.reassuring, s.mean, s.max}) f.push_back(exact(v));
      f.push_back(s.parse_failure ? "1" : "0");
    } else {
      f.insert(f.end(), 6, "");
    }
    for (const char* dim : {"knowledgeable", "emotional"}) {
      const auto it = row.preference_share.find(dim);
      f.push_back(it == row.preference_share.end() ? "" : exact(it->second));
    }
    f.push_back(ballots("knowledgeable"));
    f.push_back(ballots("emotional"));
    for (std::size_t i = 0; i < f.size(); ++i) out << (i ? "," : "") << f[i];
    out << "\n";
  }
  return out.str();
}

MetricReport report_from_csv(std::string_view csv) {
  std::istringstream in{std::string(csv)};
  std::string line;
  if (!std::getline(in, line)) throw DataError("report: empty CSV");
  if (split_csv_line(line) != csv_columns()) throw DataError("report: unexpected CSV header");
  MetricReport report;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != csv_columns().size()) {
      throw DataError("report: line " + std::to_string(line_no) + " has " + std::to_string(f.size()) +
                      " fields");
    }
    MethodRow row;
    row.method = f[0];
    row.present = f[1] == "1";
    if (row.present) {
      std::size_t k = 2;
      for (MetricRow* m : {&row.doctor, &row.modified}) {
        for (double* v : {&m->bleu, &m->bleu1, &m->rouge1, &m->rouge2, &m->rougeL}) *v = parse_double(f[k++]);
      }
    }
    if (!f[12].empty()) {
      EmotionScores s;
      s.empathetic = parse_double(f[12]);
      s.comforting = parse_double(f[13]);
      s.reassuring = parse_double(f[14]);
      s.mean = parse_double(f[15]);
      s.max = parse_double(f[16]);
      s.parse_failure = f[17] == "1";
      row.intensity = s;
    }
    if (!f[18].empty()) row.preference_share["knowledgeable"] = parse_double(f[18]);
    if (!f[19].empty()) row.preference_share["emotional"] = parse_double(f[19]);
    if (!f[20].empty()) report.ballots_counted["knowledgeable"] = std::stoi(f[20]);
    if (!f[21].empty()) report.ballots_counted["emotional"] = std::stoi(f[21]);
    report.rows.push_back(std::move(row));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Aligned text

namespace {

std::string pad(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

std::string fixed(double v, int precision) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

}  // namespace

std::string report_to_text(const MetricReport& report) {
  std::size_t w = 8;
  for (const auto& row : report.rows) w = std::max(w, row.method.size() + 2);
  std::ostringstream out;
  auto header = [&](const std::string& title, std::initializer_list<const char*> cols) {
    out << title << "\n" << pad("method", w);
    for (const char* c : cols) out << pad(c, 15);
    out << "\n";
  };

  header("Emotion intensity (judge scores, 0-1)",
         {"empathetic", "comforting", "reassuring", "mean", "max"});
  for (const auto& row : report.rows) {
    out << pad(row.method, w);
    if (!row.intensity) {
      out << "absent\n";
      continue;
    }
    const auto& s = *row.intensity;
    for (double v : {s.empathetic, s.comforting, s.reassuring, s.mean, s.max}) out << pad(fixed(v, 4), 15);
    out << (s.parse_failure ? "(judge parse failures)" : "") << "\n";
  }

  for (const auto& [title, pick] :
       {std::pair{"N-gram overlap, doctor's response as label", &MethodRow::doctor},
        std::pair{"N-gram overlap, modified response as label", &MethodRow::modified}}) {
    out << "\n";
    header(title, {"BLEU", "BLEU-1", "ROUGE-1", "ROUGE-2", "ROUGE-L"});
    for (const auto& row : report.rows) {
      out << pad(row.method, w);
      if (!row.present) {
        out << "absent\n";
        continue;
      }
      const MetricRow& m = row.*pick;
      out << pad(fixed(m.bleu, 2), 15) << pad(fixed(m.bleu1, 2), 15) << pad(fixed(m.rouge1, 4), 15)
          << pad(fixed(m.rouge2, 4), 15) << pad(fixed(m.rougeL, 4), 15) << "\n";
    }
  }

  if (!report.ballots_counted.empty()) {
    out << "\n";
    header("Preference share (% of ballots won)", {"knowledgeable", "emotional"});
    for (const auto& row : report.rows) {
      out << pad(row.method, w);
      for (const char* dim : {"knowledgeable", "emotional"}) {
        const auto it = row.preference_share.find(dim);
        out << pad(it == row.preference_share.end() ? "-" : fixed(it->second, 1), 15);
      }
      out << "\n";
    }
    out << pad("ballots", w);
    for (const char* dim : {"knowledgeable", "emotional"}) {
      const auto it = report.ballots_counted.find(dim);
      out << pad(it == report.ballots_counted.end() ? "0" : std::to_string(it->second), 15);
    }
    out << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// JSON

namespace {

json metric_json(const MetricRow& m) {
  return {{"bleu", m.bleu}, {"bleu1", m.bleu1}, {"rouge1", m.rouge1}, {"rouge2", m.rouge2},
          {"rougeL", m.rougeL}};
}

MetricRow metric_from(const json& j) {
  return {j.at("bleu").get<double>(), j.at("bleu1").get<double>(), j.at("rouge1").get<double>(),
          j.at("rouge2").get<double>(), j.at("rougeL").get<double>()};
}

}  // namespace

std::string report_to_json(const MetricReport& report) {
  json rows = json::array();
  for (const auto& row : report.rows) {
    json r = {{"method", row.method}, {"present", row.present},
              {"preference_share", row.preference_share}};
    if (row.present) {
      r["doctor"] = metric_json(row.doctor);
      r["modified"] = metric_json(row.modified);
    }
    if (row.intensity) {
      const auto& s = *row.intensity;
      r["intensity"] = {{"empathetic", s.empathetic}, {"comforting", s.comforting},
                        {"reassuring", s.reassuring}, {"mean", s.mean}, {"max", s.max},
                        {"parse_failure", s.parse_failure}};
    }
    rows.push_back(std::move(r));
  }
  const json doc = {{"rows", rows}, {"ballots_counted", report.ballots_counted}};
  return doc.dump(2, ' ', false, json::error_handler_t::replace) + "\n";
}

MetricReport report_from_json(std::string_view text) {
  try {
    const json doc = json::parse(text);
    MetricReport report;
    report.ballots_counted = doc.at("ballots_counted").get<std::map<std::string, int>>();
    for (const auto& r : doc.at("rows")) {
      MethodRow row;
      row.method = r.at("method").get<std::string>();
      row.present = r.at("present").get<bool>();
      row.preference_share = r.at("preference_share").get<std::map<std::string, double>>();
      if (row.present) {
        row.doctor = metric_from(r.at("doctor"));
        row.modified = metric_from(r.at("modified"));
      }
      if (r.contains("intensity")) {
        const auto& s = r["intensity"];
        EmotionScores e;
        e.empathetic = s.at("empathetic").get<double>();
        e.comforting = s.at("comforting").get<double>();
        e.reassuring = s.at("reassuring").get<double>();
        e.mean = s.at("mean").get<double>();
        e.max = s.at("max").get<double>();
        e.parse_failure = s.at("parse_failure").get<bool>();
        row.intensity = e;
      }
      report.rows.push_back(std::move(row));
    }
    return report;
  } catch (const json::exception& e) {
    throw DataError(std::string("report: ") + e.what());
  }
}

}  // namespace alignforge::eval
