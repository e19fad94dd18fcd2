#include "nsbuild/dockerfile.hpp"

#include <algorithm>
#include <cctype>
#include <set>

namespace nsbuild::dockerfile {

namespace {

constexpr std::string_view kSpace = " \t\r\f\v";

std::string_view trim_left(std::string_view s) {
  const auto pos = s.find_first_not_of(kSpace);
  return pos == std::string_view::npos ? std::string_view{} : s.substr(pos);
}

std::string_view trim_right(std::string_view s) {
  const auto pos = s.find_last_not_of(kSpace);
  return pos == std::string_view::npos ? std::string_view{} : s.substr(0, pos + 1);
}

std::string_view trim(std::string_view s) { return trim_right(trim_left(s)); }

bool is_name_char(char c, bool first) {
  return c == '_' || std::isalpha(static_cast<unsigned char>(c)) ||
         (!first && std::isdigit(static_cast<unsigned char>(c)));
}

struct LogicalLine {
  std::string text;
  int line;
};

// Splits into logical lines: drops blank and comment lines, joins
// backslash continuations with a single space.
std::vector<LogicalLine> logical_lines(std::string_view text, const std::string& source_path) {
  std::vector<LogicalLine> out;
  std::string pending;
  int pending_line = 0;
  bool continuing = false;
  int line_no = 0;

  size_t start = 0;
  while (start <= text.size()) {
    size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view raw = text.substr(start, end - start);
    ++line_no;
    const bool last = end == text.size();
    start = end + 1;

    const std::string_view stripped = trim_left(raw);
    if (stripped.empty() || stripped.front() == '#') {
      if (last) break;
      continue;
    }

    std::string_view body = trim_right(raw);
    const bool continues = !body.empty() && body.back() == '\\';
    if (continues) body = trim_right(body.substr(0, body.size() - 1));

    if (!continuing) {
      pending.assign(trim_left(body));
      pending_line = line_no;
    } else {
      pending += ' ';
      pending.append(body);
    }
    continuing = continues;
    if (!continuing) {
      out.push_back({std::move(pending), pending_line});
      pending.clear();
    }
    if (last) break;
  }
  if (continuing) {
    throw ParseError(ParseErrorKind::UnterminatedContinuation, source_path, pending_line,
                     "backslash continuation at end of file");
  }
  return out;
}

// Shell-like word processing: quote removal, backslash escapes and
// variable expansion. With `split` false the whole text is one word.
std::vector<std::string> expand_words(std::string_view text, const std::map<std::string, std::string>& vars,
                                      std::vector<std::string>* undefined, bool split) {
  std::vector<std::string> words;
  std::string cur;
  bool have_word = false;
  enum { Plain, Single, Double } state = Plain;

  auto expand_var = [&](size_t& i) {
    // text[i] == '$'
    std::string name;
    if (i + 1 < text.size() && text[i + 1] == '{') {
      const auto close = text.find('}', i + 2);
      if (close == std::string_view::npos) {
        cur += text.substr(i);
        i = text.size();
        return;
      }
      name.assign(text.substr(i + 2, close - i - 2));
      i = close + 1;
    } else {
      size_t j = i + 1;
      while (j < text.size() && is_name_char(text[j], j == i + 1)) ++j;
      if (j == i + 1) {
        cur += '$';
        ++i;
        return;
      }
      name.assign(text.substr(i + 1, j - i - 1));
      i = j;
    }
    if (auto it = vars.find(name); it != vars.end()) {
      cur += it->second;
    } else if (undefined != nullptr) {
      undefined->push_back(name);
    }
  };

  size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    switch (state) {
      case Plain:
        if (split && std::isspace(static_cast<unsigned char>(c))) {
          if (have_word) words.push_back(std::move(cur));
          cur.clear();
          have_word = false;
          ++i;
          continue;
        }
        have_word = true;
        if (c == '\'') {
          state = Single;
          ++i;
        } else if (c == '"') {
          state = Double;
          ++i;
        } else if (c == '\\' && i + 1 < text.size()) {
          cur += text[i + 1];
          i += 2;
        } else if (c == '$') {
          expand_var(i);
        } else {
          cur += c;
          ++i;
        }
        break;
      case Single:
        if (c == '\'') {
          state = Plain;
        } else {
          cur += c;
        }
        ++i;
        break;
      case Double:
        if (c == '"') {
          state = Plain;
          ++i;
        } else if (c == '\\' && i + 1 < text.size() &&
                   (text[i + 1] == '"' || text[i + 1] == '\\' || text[i + 1] == '$')) {
          cur += text[i + 1];
          i += 2;
        } else if (c == '$') {
          expand_var(i);
        } else {
          cur += c;
          ++i;
        }
        break;
    }
  }
  if (have_word || !split) words.push_back(std::move(cur));
  return words;
}

// Quotes a word so expand_words() returns it unchanged.
std::string quote_word(std::string_view word) {
  const bool safe = !word.empty() && std::all_of(word.begin(), word.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || std::string_view("_./:@%+,=-").find(c) != std::string_view::npos;
  });
  if (safe) return std::string(word);
  std::string out = "\"";
  for (char c : word) {
    if (c == '"' || c == '\\' || c == '$') out += '\\';
    out += c;
  }
  out += '"';
  return out;
}

std::optional<InstructionKind> keyword_kind(std::string_view word) {
  std::string upper(word);
  std::transform(upper.begin(), upper.end(), upper.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (upper == "FROM") return InstructionKind::From;
  if (upper == "RUN") return InstructionKind::Run;
  if (upper == "COPY") return InstructionKind::Copy;
  if (upper == "ENV") return InstructionKind::Env;
  if (upper == "WORKDIR") return InstructionKind::Workdir;
  if (upper == "ARG") return InstructionKind::Arg;
  return std::nullopt;
}

bool valid_name(std::string_view name) {
  if (name.empty()) return false;
  for (size_t i = 0; i < name.size(); ++i) {
    if (!is_name_char(name[i], i == 0)) return false;
  }
  return true;
}

}  // namespace

std::string_view keyword(InstructionKind kind) {
  switch (kind) {
    case InstructionKind::From: return "FROM";
    case InstructionKind::Run: return "RUN";
    case InstructionKind::Copy: return "COPY";
    case InstructionKind::Env: return "ENV";
    case InstructionKind::Workdir: return "WORKDIR";
    case InstructionKind::Arg: return "ARG";
  }
  return "?";
}

ParseError::ParseError(ParseErrorKind kind, std::string source_path, int line, std::string detail)
    : KindedError(kind, source_path + ":" + std::to_string(line) + ": " + detail),
      line_(line),
      detail_(std::move(detail)) {}

std::string substitute(std::string_view text, const std::map<std::string, std::string>& vars,
                       std::vector<std::string>* undefined) {
  return expand_words(text, vars, undefined, false).front();
}

Recipe parse(std::string_view text, std::string source_path, const BuildArgs& build_args) {
  Recipe recipe;
  recipe.source_path = source_path;
  std::map<std::string, std::string> vars;
  std::set<std::string> consumed_args;

  auto fail = [&](ParseErrorKind kind, int line, std::string detail) -> ParseError {
    return ParseError(kind, source_path, line, std::move(detail));
  };

  for (const LogicalLine& ll : logical_lines(text, source_path)) {
    const std::string_view whole = ll.text;
    const auto split_at = whole.find_first_of(kSpace);
    const std::string_view word = whole.substr(0, split_at);
    const std::string_view rest =
        split_at == std::string_view::npos ? std::string_view{} : trim(whole.substr(split_at));

    const auto kind = keyword_kind(word);
    if (!kind) {
      throw fail(ParseErrorKind::UnknownInstruction, ll.line,
                 "unknown instruction: " + std::string(word));
    }
    if (recipe.instructions.empty() && *kind != InstructionKind::From) {
      throw fail(ParseErrorKind::MissingFrom, ll.line,
                 std::string(keyword(*kind)) + " before FROM; the first instruction must be FROM");
    }

    std::vector<std::string> undefined;
    auto words = [&](std::string_view s) { return expand_words(s, vars, &undefined, true); };

    Instruction ins{*kind, FromArgs{}, ll.line};
    switch (*kind) {
      case InstructionKind::From: {
        if (!recipe.instructions.empty()) {
          throw fail(ParseErrorKind::MultipleFrom, ll.line, "multi-stage builds are not supported");
        }
        auto w = words(rest);
        if (w.size() != 1 || w.front().empty() || w.front().starts_with("--")) {
          throw fail(ParseErrorKind::Malformed, ll.line, "FROM takes exactly one image reference");
        }
        ins.payload = FromArgs{w.front()};
        break;
      }
      case InstructionKind::Run: {
        if (rest.empty()) throw fail(ParseErrorKind::EmptyRun, ll.line, "RUN with empty command");
        if (rest.front() == '[') {
          throw fail(ParseErrorKind::UnknownInstruction, ll.line,
                     "exec-form RUN is not supported; use shell form");
        }
        ins.payload = RunArgs{std::string(rest)};
        break;
      }
      case InstructionKind::Copy: {
        if (!rest.empty() && rest.front() == '[') {
          throw fail(ParseErrorKind::Malformed, ll.line, "JSON-form COPY is not supported");
        }
        auto w = words(rest);
        if (!w.empty() && w.front().starts_with("--")) {
          throw fail(ParseErrorKind::Malformed, ll.line, "COPY flags are not supported: " + w.front());
        }
        if (w.size() < 2) throw fail(ParseErrorKind::Malformed, ll.line, "COPY needs a source and a destination");
        CopyArgs copy;
        copy.destination = w.back();
        w.pop_back();
        copy.sources = std::move(w);
        ins.payload = std::move(copy);
        break;
      }
      case InstructionKind::Env: {
        const auto eq = rest.find('=');
        const auto sp = rest.find_first_of(kSpace);
        VariableArgs var;
        if (eq != std::string_view::npos && (sp == std::string_view::npos || eq < sp)) {
          var.key = std::string(rest.substr(0, eq));
          auto w = words(rest.substr(eq + 1));
          if (w.size() > 1) {
            throw fail(ParseErrorKind::Malformed, ll.line,
                       "ENV supports one assignment per instruction; quote values containing spaces");
          }
          var.value = w.empty() ? std::string{} : w.front();
        } else {
          if (sp == std::string_view::npos) throw fail(ParseErrorKind::Malformed, ll.line, "ENV needs a value");
          var.key = std::string(rest.substr(0, sp));
          var.value = substitute(trim(rest.substr(sp)), vars, &undefined);
        }
        if (!valid_name(var.key)) throw fail(ParseErrorKind::Malformed, ll.line, "invalid ENV name: " + var.key);
        vars[var.key] = *var.value;
        ins.payload = std::move(var);
        break;
      }
      case InstructionKind::Arg: {
        VariableArgs var;
        const auto eq = rest.find('=');
        if (eq == std::string_view::npos) {
          var.key = std::string(rest);
        } else {
          var.key = std::string(rest.substr(0, eq));
          auto w = words(rest.substr(eq + 1));
          if (w.size() > 1) throw fail(ParseErrorKind::Malformed, ll.line, "ARG default must be one word");
          var.value = w.empty() ? std::string{} : w.front();
        }
        if (!valid_name(var.key)) throw fail(ParseErrorKind::Malformed, ll.line, "invalid ARG name: " + var.key);
        if (auto it = build_args.find(var.key); it != build_args.end()) {
          vars[var.key] = it->second;
          consumed_args.insert(var.key);
        } else {
          vars[var.key] = var.value.value_or("");
        }
        ins.payload = std::move(var);
        break;
      }
      case InstructionKind::Workdir: {
        // One word: quotes are removed but unquoted spaces stay part of the path.
        const std::string path = std::string(trim(expand_words(rest, vars, &undefined, false).front()));
        if (path.empty()) throw fail(ParseErrorKind::Malformed, ll.line, "WORKDIR needs a path");
        ins.payload = WorkdirArgs{path};
        break;
      }
    }
    for (const auto& name : undefined) {
      recipe.warnings.push_back(source_path + ":" + std::to_string(ll.line) + ": variable " + name +
                                " is not defined; expanded to empty string");
    }
    recipe.instructions.push_back(std::move(ins));
  }

  if (recipe.instructions.empty()) {
    throw fail(ParseErrorKind::MissingFrom, 1, "no FROM instruction");
  }
  for (const auto& [key, value] : build_args) {
    if (!consumed_args.contains(key)) {
      recipe.warnings.push_back("build argument " + key + " was not consumed by any ARG");
    }
  }
  return recipe;
}

std::vector<std::string> shell_form(const Instruction& run) {
  if (run.kind != InstructionKind::Run) {
    throw WrongKind("shell_form: expected RUN, got " + std::string(keyword(run.kind)));
  }
  return {"/bin/sh", "-c", run.as<RunArgs>().command};
}

std::string serialize(const Instruction& ins) {
  std::string out(keyword(ins.kind));
  out += ' ';
  switch (ins.kind) {
    case InstructionKind::From:
      out += quote_word(ins.as<FromArgs>().image);
      break;
    case InstructionKind::Run:
      out += ins.as<RunArgs>().command;
      break;
    case InstructionKind::Copy: {
      const auto& copy = ins.as<CopyArgs>();
      for (const auto& src : copy.sources) out += quote_word(src) + ' ';
      out += quote_word(copy.destination);
      break;
    }
    case InstructionKind::Env:
    case InstructionKind::Arg: {
      const auto& var = ins.as<VariableArgs>();
      out += var.key;
      if (var.value) out += '=' + (var.value->empty() ? std::string("\"\"") : quote_word(*var.value));
      break;
    }
    case InstructionKind::Workdir:
      out += quote_word(ins.as<WorkdirArgs>().path);
      break;
  }
  return out;
}

}  // namespace nsbuild::dockerfile
