#include "ptsr/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "ptsr/errors.hpp"
#include "ptsr/rng.hpp"

namespace ptsr::data {

namespace {

using nlohmann::json;

std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(delim, start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

std::int64_t parse_timestamp(const std::string& field, std::size_t line_no) {
  std::int64_t value = 0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec == std::errc() && ptr == last) return value;
  // tolerate fractional exports ("1369699200.0")
  try {
    std::size_t used = 0;
    const double d = std::stod(field, &used);
    if (used == field.size()) return static_cast<std::int64_t>(d);
  } catch (const std::exception&) {
  }
  throw Error(ErrorKind::Io, "ingest: line " + std::to_string(line_no) +
                                 ": bad timestamp '" + field + "'");
}

}  // namespace

TextFormat TextFormat::named(const std::string& name) {
  TextFormat fmt;
  if (name == "tsv") {
    fmt.delimiter = '\t';
  } else if (name == "csv") {
    fmt.delimiter = ',';
  } else if (name == "amazon") {
    fmt.delimiter = ',';
    fmt.header = false;
    fmt.headerless_uirt = true;
  } else {
    throw_usage("unknown input format '" + name + "' (expected tsv, csv, or amazon)");
  }
  return fmt;
}

InteractionLog ingest(const std::string& path, const TextFormat& fmt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Usage, "ingest: cannot open input file " + path);

  struct Row {
    Interaction rec;
    std::size_t order;
  };
  std::vector<Row> rows;

  std::string line;
  std::size_t line_no = 0;
  int user_idx = 0, item_idx = 1, time_idx = 2, min_fields = 3;
  bool header_pending = fmt.header && !fmt.headerless_uirt;
  if (fmt.headerless_uirt) {
    user_idx = 0;
    item_idx = 1;
    time_idx = 3;
    min_fields = 4;
  }

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_line(line, fmt.delimiter);
    if (header_pending) {
      header_pending = false;
      user_idx = item_idx = time_idx = -1;
      for (std::size_t i = 0; i < fields.size(); ++i) {
        if (fields[i] == fmt.user_col) user_idx = static_cast<int>(i);
        if (fields[i] == fmt.item_col) item_idx = static_cast<int>(i);
        if (fields[i] == fmt.time_col) time_idx = static_cast<int>(i);
      }
      if (user_idx < 0 || item_idx < 0 || time_idx < 0) {
        throw Error(ErrorKind::Io,
                    "ingest: header is missing one of the columns '" +
                        fmt.user_col + "', '" + fmt.item_col + "', '" +
                        fmt.time_col + "'");
      }
      min_fields = std::max({user_idx, item_idx, time_idx}) + 1;
      continue;
    }
    if (static_cast<int>(fields.size()) < min_fields) {
      throw Error(ErrorKind::Io, "ingest: line " + std::to_string(line_no) +
                                     ": expected at least " +
                                     std::to_string(min_fields) + " fields");
    }
    Row row;
    row.rec.user = fields[user_idx];
    row.rec.item = fields[item_idx];
    if (row.rec.user.empty() || row.rec.item.empty()) {
      throw Error(ErrorKind::Io,
                  "ingest: line " + std::to_string(line_no) + ": empty field");
    }
    row.rec.ts = parse_timestamp(fields[time_idx], line_no);
    row.order = line_no;
    rows.push_back(std::move(row));
  }
  if (rows.empty()) {
    throw Error(ErrorKind::Io, "ingest: no interactions in " + path);
  }

  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.rec.user != b.rec.user) return a.rec.user < b.rec.user;
    if (a.rec.ts != b.rec.ts) return a.rec.ts < b.rec.ts;
    return a.order < b.order;
  });

  InteractionLog log;
  log.records.reserve(rows.size());
  // drop exact (user, item, timestamp) duplicates; repeated (user, item)
  // pairs at different timestamps are meaningful and kept
  std::set<std::tuple<std::string, std::string, std::int64_t>> seen;
  for (auto& row : rows) {
    auto key = std::make_tuple(row.rec.user, row.rec.item, row.rec.ts);
    if (!seen.insert(std::move(key)).second) continue;
    log.records.push_back(std::move(row.rec));
  }
  return log;
}

InteractionLog five_core_filter(const InteractionLog& log) {
  if (log.records.empty()) throw_usage("five_core_filter: empty log");
  std::vector<char> alive(log.records.size(), 1);

  bool changed = true;
  while (changed) {
    changed = false;
    std::unordered_map<std::string, int> user_count;
    for (std::size_t i = 0; i < log.records.size(); ++i)
      if (alive[i]) ++user_count[log.records[i].user];
    for (std::size_t i = 0; i < log.records.size(); ++i) {
      if (alive[i] && user_count[log.records[i].user] < 5) {
        alive[i] = 0;
        changed = true;
      }
    }
    std::unordered_map<std::string, int> item_count;
    for (std::size_t i = 0; i < log.records.size(); ++i)
      if (alive[i]) ++item_count[log.records[i].item];
    for (std::size_t i = 0; i < log.records.size(); ++i) {
      if (alive[i] && item_count[log.records[i].item] < 5) {
        alive[i] = 0;
        changed = true;
      }
    }
  }

  InteractionLog out;
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    if (alive[i]) out.records.push_back(log.records[i]);
  }
  if (out.records.empty()) {
    throw_usage("five_core_filter: no users or items survive (dataset too sparse)");
  }
  return out;
}

const std::string& SplitDataset::item_name(int id) const {
  if (id < 1 || id > vocab()) throw_usage("item_name: id out of range");
  return items[id - 1];
}

int SplitDataset::item_id(const std::string& name) const {
  const auto it = std::lower_bound(items.begin(), items.end(), name);
  if (it == items.end() || *it != name) return 0;
  return static_cast<int>(it - items.begin()) + 1;
}

int SplitDataset::user_index(const std::string& name) const {
  const auto it = std::lower_bound(
      users.begin(), users.end(), name,
      [](const UserSplit& u, const std::string& n) { return u.name < n; });
  if (it == users.end() || it->name != name) return -1;
  return static_cast<int>(it - users.begin());
}

std::vector<int> SplitDataset::valid_input(int u) const {
  return users[u].train;
}

std::vector<int> SplitDataset::test_input(int u) const {
  std::vector<int> seq = users[u].train;
  seq.push_back(users[u].valid);
  if (static_cast<int>(seq.size()) > max_len) {
    seq.erase(seq.begin(), seq.end() - max_len);
  }
  return seq;
}

SplitDataset split(const InteractionLog& log, int max_len) {
  if (max_len < 1) throw_usage("split: max_len must be >= 1");
  if (log.records.empty()) throw_usage("split: empty log");

  std::vector<std::string> item_names;
  {
    std::set<std::string> uniq;
    for (const auto& r : log.records) uniq.insert(r.item);
    item_names.assign(uniq.begin(), uniq.end());
  }
  std::unordered_map<std::string, int> ids;
  ids.reserve(item_names.size());
  for (std::size_t i = 0; i < item_names.size(); ++i)
    ids[item_names[i]] = static_cast<int>(i) + 1;

  SplitDataset ds;
  ds.max_len = max_len;
  ds.items = std::move(item_names);

  std::size_t i = 0;
  while (i < log.records.size()) {
    std::size_t j = i;
    while (j < log.records.size() && log.records[j].user == log.records[i].user) ++j;
    const std::size_t count = j - i;
    if (count < 3) {
      throw_usage("split: user " + log.records[i].user +
                  " has fewer than 3 interactions");
    }
    UserSplit u;
    u.name = log.records[i].user;
    u.history.reserve(count);
    for (std::size_t k = i; k < j; ++k) u.history.push_back(ids[log.records[k].item]);
    u.test = u.history[count - 1];
    u.valid = u.history[count - 2];
    const std::size_t train_len = std::min<std::size_t>(count - 2, max_len);
    u.train.assign(u.history.end() - 2 - train_len, u.history.end() - 2);
    ds.users.push_back(std::move(u));
    i = j;
  }
  return ds;
}

void build_eval_candidates(SplitDataset& ds, int count, std::uint64_t seed) {
  if (count < 1) throw_usage("build_eval_candidates: count must be >= 1");
  const int vocab = ds.vocab();
  for (std::size_t u = 0; u < ds.users.size(); ++u) {
    auto& user = ds.users[u];
    std::unordered_set<int> taken(user.history.begin(), user.history.end());
    if (vocab <= count + static_cast<int>(taken.size())) {
      throw_usage("build_eval_candidates: vocabulary too small for " +
                  std::to_string(count) + " negatives (user " + user.name + ")");
    }
    auto gen = rng::engine(rng::derive(seed, u));
    user.negatives.clear();
    user.negatives.reserve(count);
    while (static_cast<int>(user.negatives.size()) < count) {
      const int id = 1 + static_cast<int>(rng::below(gen, vocab));
      if (taken.insert(id).second) user.negatives.push_back(id);
    }
  }
  ds.negatives_per_user = count;
  ds.candidate_seed = seed;
}

std::string serialize_bundle(const SplitDataset& ds) {
  json users = json::array();
  for (const auto& u : ds.users) {
    users.push_back({{"name", u.name},
                     {"history", u.history},
                     {"train", u.train},
                     {"valid", u.valid},
                     {"test", u.test},
                     {"negatives", u.negatives}});
  }
  const json doc = {{"format", "ptsr.dataset"},
                    {"format_version", ds.format_version},
                    {"max_len", ds.max_len},
                    {"negatives_per_user", ds.negatives_per_user},
                    {"candidate_seed", ds.candidate_seed},
                    {"run_config", ds.run_config},
                    {"items", ds.items},
                    {"users", users}};
  return doc.dump();
}

void save_bundle(const SplitDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "save_bundle: cannot write " + path);
  out << serialize_bundle(ds) << '\n';
  if (!out) throw Error(ErrorKind::Io, "save_bundle: write failed for " + path);
}

SplitDataset load_bundle(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "load_bundle: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();

  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Io, "load_bundle: " + path + ": " + e.what());
  }
  if (doc.value("format", "") != "ptsr.dataset") {
    throw_usage("load_bundle: " + path + " is not a dataset bundle");
  }
  SplitDataset ds;
  if (doc.value("format_version", -1) != ds.format_version) {
    throw_usage("load_bundle: unsupported dataset format version in " + path);
  }
  try {
    ds.max_len = doc.at("max_len").get<int>();
    ds.negatives_per_user = doc.at("negatives_per_user").get<int>();
    ds.candidate_seed = doc.at("candidate_seed").get<std::uint64_t>();
    ds.run_config = doc.value("run_config", "");
    ds.items = doc.at("items").get<std::vector<std::string>>();
    for (const auto& ju : doc.at("users")) {
      UserSplit u;
      u.name = ju.at("name").get<std::string>();
      u.history = ju.at("history").get<std::vector<int>>();
      u.train = ju.at("train").get<std::vector<int>>();
      u.valid = ju.at("valid").get<int>();
      u.test = ju.at("test").get<int>();
      u.negatives = ju.at("negatives").get<std::vector<int>>();
      ds.users.push_back(std::move(u));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Io, "load_bundle: malformed bundle: " + std::string(e.what()));
  }
  ds.file_hash = fnv1a({text.data(), text.size()});
  return ds;
}

std::uint64_t fnv1a(std::span<const char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

BatchStream::BatchStream(const SplitDataset& ds, int batch_size,
                         std::uint64_t seed)
    : ds_(&ds), batch_size_(batch_size), seed_(seed) {
  if (batch_size < 1) throw_usage("batches: batch_size must be >= 1");
  for (std::size_t u = 0; u < ds.users.size(); ++u) {
    if (ds.users[u].train.size() >= 2) eligible_.push_back(static_cast<int>(u));
  }
  if (eligible_.empty()) throw_usage("batches: no user has a trainable sequence");
}

std::vector<Batch> BatchStream::epoch(int epoch_index) const {
  const int n = ds_->max_len;
  std::vector<int> order = eligible_;
  auto shuffle_gen = rng::engine(rng::derive(seed_, 0x9000u + epoch_index));
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = rng::below(shuffle_gen, i);
    std::swap(order[i - 1], order[j]);
  }

  const std::uint64_t epoch_seed = rng::derive(seed_, epoch_index);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size_) {
    const int rows =
        static_cast<int>(std::min<std::size_t>(batch_size_, order.size() - start));
    Batch b;
    b.rows = rows;
    b.cols = n;
    b.ids.assign(static_cast<std::size_t>(rows) * n, 0);
    b.mask.assign(static_cast<std::size_t>(rows) * n, 0);
    for (int r = 0; r < rows; ++r) {
      const int u = order[start + r];
      const auto& user = ds_->users[u];
      auto gen = rng::engine(rng::derive(epoch_seed, u));
      // prefix position: input = train[0..t), positive = train[t]
      const int t =
          1 + static_cast<int>(rng::below(gen, user.train.size() - 1));
      b.user_index.push_back(u);
      for (int k = 0; k < t; ++k) {
        b.ids[static_cast<std::size_t>(r) * n + (n - t + k)] = user.train[k];
        b.mask[static_cast<std::size_t>(r) * n + (n - t + k)] = 1;
      }
      b.positives.push_back(user.train[t]);
      std::unordered_set<int> history(user.history.begin(), user.history.end());
      int neg = 0;
      do {
        neg = 1 + static_cast<int>(rng::below(gen, ds_->vocab()));
      } while (history.count(neg) > 0);
      b.negatives.push_back(neg);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace ptsr::data
