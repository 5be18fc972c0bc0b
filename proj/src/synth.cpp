#include "ptsr/synth.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "ptsr/errors.hpp"
#include "ptsr/rng.hpp"

namespace ptsr::synth {

namespace {

std::string padded_number(int value, int width) {
  std::string s = std::to_string(value);
  if (static_cast<int>(s.size()) < width) {
    s.insert(s.begin(), width - s.size(), '0');
  }
  return s;
}

int digits(int n) {
  int w = 1;
  while (n >= 10) {
    n /= 10;
    ++w;
  }
  return w;
}

}  // namespace

std::string user_name(int index, int total) {
  return "u" + padded_number(index + 1, digits(total));
}

std::string item_name(int id, int vocab) {
  return "i" + padded_number(id, digits(vocab));
}

void SynthConfig::validate() const {
  if (vocab < 2) throw_usage("synth: vocab must be >= 2");
  if (users < 1) throw_usage("synth: users must be >= 1");
  if (len_min < 1 || len_max < len_min) throw_usage("synth: bad length range");
  if (!(noise >= 0.0 && noise < 1.0)) throw_usage("synth: noise must be in [0, 1)");
  if (rules.empty()) throw_usage("synth: rule set must not be empty");

  std::map<std::vector<int>, double> group_prob;
  std::map<std::vector<int>, std::set<int>> group_consequents;
  for (const auto& r : rules) {
    if (r.antecedent.empty() || r.antecedent.size() > 3) {
      throw_usage("synth: antecedent length must be 1..3");
    }
    std::set<int> uniq(r.antecedent.begin(), r.antecedent.end());
    if (uniq.size() != r.antecedent.size()) {
      throw_usage("synth: antecedent items must be distinct");
    }
    if (uniq.count(r.consequent) > 0) {
      throw_usage("synth: consequent must not appear in the antecedent");
    }
    for (int id : r.antecedent) {
      if (id < 1 || id > vocab) throw_usage("synth: rule item id out of vocabulary");
    }
    if (r.consequent < 1 || r.consequent > vocab) {
      throw_usage("synth: consequent id out of vocabulary");
    }
    if (!(r.prob > 0.0 && r.prob <= 1.0)) {
      throw_usage("synth: firing probability must be in (0, 1]");
    }
    group_prob[r.antecedent] += r.prob;
    group_consequents[r.antecedent].insert(r.consequent);
  }
  for (const auto& [ante, p] : group_prob) {
    if (group_consequents[ante].size() > 1 && p > 1.0 + 1e-12) {
      throw_usage("synth: rules sharing an antecedent have firing probabilities summing > 1");
    }
    if (p > 1.0 + 1e-12) {
      throw_usage("synth: duplicate rules on one antecedent exceed probability 1");
    }
  }
}

std::vector<PlantedRule> SynthConfig::random_rules(int one_item, int two_item,
                                                   double prob, int vocab,
                                                   std::uint64_t seed) {
  auto gen = rng::engine(rng::derive(seed, 0x52554c45u));  // rule stream
  std::set<std::vector<int>> used;
  std::vector<PlantedRule> rules;
  auto draw = [&gen, vocab] {
    return 1 + static_cast<int>(rng::below(gen, vocab));
  };
  for (int k = 0; k < two_item; ++k) {
    while (true) {
      const int a = draw();
      const int b = draw();
      if (a == b) continue;
      std::vector<int> ante = {a, b};
      if (used.count(ante) > 0) continue;
      int c = draw();
      while (c == a || c == b) c = draw();
      used.insert(ante);
      rules.push_back({std::move(ante), c, prob});
      break;
    }
  }
  for (int k = 0; k < one_item; ++k) {
    while (true) {
      const int a = draw();
      std::vector<int> ante = {a};
      if (used.count(ante) > 0) continue;
      int c = draw();
      while (c == a) c = draw();
      used.insert(ante);
      rules.push_back({std::move(ante), c, prob});
      break;
    }
  }
  return rules;
}

SynthConfig SynthConfig::reference() {
  SynthConfig cfg;
  cfg.vocab = 200;
  cfg.users = 2000;
  cfg.len_min = 15;
  cfg.len_max = 20;
  cfg.noise = 0.2;
  cfg.seed = 7;
  cfg.rules = random_rules(10, 20, 0.9, cfg.vocab, cfg.seed);
  return cfg;
}

SynthOutput generate(const SynthConfig& config) {
  config.validate();

  // Antecedent groups, longest first; the most recent window that matches
  // the longest antecedent wins the firing draw.
  struct Group {
    std::vector<int> antecedent;
    std::vector<const PlantedRule*> rules;
  };
  std::map<std::vector<int>, std::vector<const PlantedRule*>> grouped;
  for (const auto& r : config.rules) grouped[r.antecedent].push_back(&r);
  std::vector<Group> groups;
  for (auto& [ante, rules] : grouped) groups.push_back({ante, rules});
  std::stable_sort(groups.begin(), groups.end(), [](const Group& a, const Group& b) {
    return a.antecedent.size() > b.antecedent.size();
  });

  SynthOutput out;
  for (int u = 0; u < config.users; ++u) {
    auto gen = rng::engine(rng::derive(config.seed, u));
    const int len =
        config.len_min +
        static_cast<int>(rng::below(gen, config.len_max - config.len_min + 1));
    std::vector<int> seq;
    seq.reserve(len);
    std::deque<int> plan;

    for (int t = 0; t < len; ++t) {
      int emitted = 0;
      for (const auto& g : groups) {
        const std::size_t a = g.antecedent.size();
        if (seq.size() < a) continue;
        if (!std::equal(g.antecedent.begin(), g.antecedent.end(),
                        seq.end() - a)) {
          continue;
        }
        const double u01 = rng::uniform(gen);
        double cum = 0.0;
        for (const PlantedRule* r : g.rules) {
          cum += r->prob;
          if (u01 < cum) {
            emitted = r->consequent;
            KeyPattern key;
            key.user = u;
            key.target_pos = t;
            for (std::size_t k = 0; k < a; ++k) {
              key.antecedent_pos.push_back(t - static_cast<int>(a) + static_cast<int>(k));
            }
            out.key_map.push_back(std::move(key));
            plan.clear();
            break;
          }
        }
        if (emitted != 0) break;
      }
      if (emitted == 0) {
        if (rng::uniform(gen) < config.noise) {
          emitted = 1 + static_cast<int>(rng::below(gen, config.vocab));
        } else {
          if (plan.empty()) {
            const auto& rule =
                config.rules[rng::below(gen, config.rules.size())];
            plan.assign(rule.antecedent.begin(), rule.antecedent.end());
          }
          emitted = plan.front();
          plan.pop_front();
        }
      }
      seq.push_back(emitted);
    }

    const std::string uname = user_name(u, config.users);
    for (int t = 0; t < len; ++t) {
      out.log.records.push_back(
          {uname, item_name(seq[t], config.vocab), t});
    }
  }
  return out;
}

void write_log(const data::InteractionLog& log, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "synth: cannot write " + path);
  out << "user\titem\ttimestamp\n";
  for (const auto& r : log.records) {
    out << r.user << '\t' << r.item << '\t' << r.ts << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "synth: write failed for " + path);
}

void write_key_map(const std::vector<KeyPattern>& map, const SynthConfig& cfg,
                   const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "synth: cannot write " + path);
  out << "user\ttarget_pos\tantecedent_pos\n";
  for (const auto& k : map) {
    out << user_name(k.user, cfg.users) << '\t' << k.target_pos << '\t';
    for (std::size_t i = 0; i < k.antecedent_pos.size(); ++i) {
      if (i > 0) out << ',';
      out << k.antecedent_pos[i];
    }
    out << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "synth: write failed for " + path);
}

std::vector<KeyPattern> read_key_map(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "synth: cannot open " + path);
  std::vector<KeyPattern> out;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    std::istringstream ss(line);
    std::string user, pos, antes;
    if (!std::getline(ss, user, '\t') || !std::getline(ss, pos, '\t') ||
        !std::getline(ss, antes, '\t')) {
      throw Error(ErrorKind::Io, "synth: malformed key map line: " + line);
    }
    KeyPattern k;
    k.user = std::stoi(user.substr(1)) - 1;
    k.target_pos = std::stoi(pos);
    std::istringstream as(antes);
    std::string field;
    while (std::getline(as, field, ',')) {
      k.antecedent_pos.push_back(std::stoi(field));
    }
    out.push_back(std::move(k));
  }
  return out;
}

}  // namespace ptsr::synth
