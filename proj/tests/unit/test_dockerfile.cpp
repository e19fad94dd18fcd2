#include <gtest/gtest.h>

#include <random>

#include "nsbuild/dockerfile.hpp"
#include "testing.hpp"

using namespace nsbuild::dockerfile;
namespace t = nsbuild::test;

namespace {

ParseErrorKind parse_error_kind(std::string_view text) {
  try {
    parse(text, "Dockerfile");
  } catch (const ParseError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no parse error for: " << text;
  return ParseErrorKind::Malformed;
}

int parse_error_line(std::string_view text) {
  try {
    parse(text, "Dockerfile");
  } catch (const ParseError& e) {
    return e.line();
  }
  return -1;
}

// Reference interpreters delete each backslash-newline pair outright.
std::string reference_join(std::string_view text) {
  std::string out;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '\\' && i + 1 < text.size() && text[i + 1] == '\n') {
      ++i;
      continue;
    }
    out += text[i];
  }
  return out;
}

}  // namespace

TEST(Parse, CentosDockerfile) {
  const auto r = parse("FROM centos:7\nRUN echo hello\nRUN yum install -y openssh", "centos7.dockerfile");
  ASSERT_EQ(r.instructions.size(), 3u);
  EXPECT_EQ(r.instructions[0].kind, InstructionKind::From);
  EXPECT_EQ(r.instructions[0].as<FromArgs>().image, "centos:7");
  EXPECT_EQ(r.instructions[1].as<RunArgs>().command, "echo hello");
  EXPECT_EQ(r.instructions[2].as<RunArgs>().command, "yum install -y openssh");
  EXPECT_EQ(r.source_path, "centos7.dockerfile");
}

TEST(Parse, RunBeforeFromIsMissingFrom) {
  EXPECT_EQ(parse_error_kind("RUN echo hi"), ParseErrorKind::MissingFrom);
  EXPECT_EQ(parse_error_kind(""), ParseErrorKind::MissingFrom);
  EXPECT_EQ(parse_error_kind("# only a comment\n\n"), ParseErrorKind::MissingFrom);
}

TEST(Parse, ContinuationJoin) {
  const std::string text = "FROM a\nRUN echo \\\n hi";
  const auto r = parse(text, "Dockerfile");
  ASSERT_EQ(r.instructions.size(), 2u);
  EXPECT_EQ(r.instructions[1].as<RunArgs>().command, "echo  hi");
  // Same answer as deleting the backslash-newline, as other interpreters do.
  EXPECT_EQ(reference_join(text).substr(reference_join(text).find("echo")), "echo  hi");
  EXPECT_EQ(r.instructions[1].line, 2);
}

TEST(Parse, ContinuationAcrossSeveralLinesKeepsFirstLineNumber) {
  const auto r = parse("FROM a\n\nRUN a \\\n  b \\\n  c\nRUN d", "Dockerfile");
  ASSERT_EQ(r.instructions.size(), 3u);
  EXPECT_EQ(r.instructions[1].as<RunArgs>().command, "a   b   c");
  EXPECT_EQ(r.instructions[1].line, 3);
  EXPECT_EQ(r.instructions[2].line, 6);
}

TEST(Parse, UnknownInstructionReportsLine) {
  EXPECT_EQ(parse_error_kind("FROM a\n\nCMD [\"x\"]"), ParseErrorKind::UnknownInstruction);
  EXPECT_EQ(parse_error_line("FROM a\n\nCMD [\"x\"]"), 3);
  EXPECT_EQ(parse_error_kind("FROM a\nRUN [\"/bin/true\"]"), ParseErrorKind::UnknownInstruction);
}

TEST(Parse, UnterminatedContinuation) {
  EXPECT_EQ(parse_error_kind("FROM a\nRUN echo \\"), ParseErrorKind::UnterminatedContinuation);
  EXPECT_EQ(parse_error_kind("FROM a\nRUN echo \\\n"), ParseErrorKind::UnterminatedContinuation);
}

TEST(Parse, OtherErrors) {
  EXPECT_EQ(parse_error_kind("FROM a\nFROM b"), ParseErrorKind::MultipleFrom);
  EXPECT_EQ(parse_error_kind("FROM a\nRUN   "), ParseErrorKind::EmptyRun);
  EXPECT_EQ(parse_error_kind("FROM a b"), ParseErrorKind::Malformed);
  EXPECT_EQ(parse_error_kind("FROM a\nCOPY only-one"), ParseErrorKind::Malformed);
  EXPECT_EQ(parse_error_kind("FROM a\nCOPY --chown=1 a b"), ParseErrorKind::Malformed);
  EXPECT_EQ(parse_error_kind("FROM a\nENV 1BAD=x"), ParseErrorKind::Malformed);
}

TEST(Parse, CommentsBlankLinesAndCase) {
  const auto r = parse("# syntax\n\nfrom a\n  # indented comment\nrun true\n", "Dockerfile");
  ASSERT_EQ(r.instructions.size(), 2u);
  EXPECT_EQ(r.instructions[0].line, 3);
  EXPECT_EQ(r.instructions[1].line, 5);
}

TEST(Parse, SubstitutionFromArgAndEnv) {
  const char* text =
      "FROM a\n"
      "ARG VERSION=1.0\n"
      "ENV APP=/opt/app-$VERSION\n"
      "WORKDIR ${APP}/bin\n"
      "COPY src/$VERSION ${APP}/\n"
      "RUN echo $APP\n";
  const auto r = parse(text, "Dockerfile");
  EXPECT_EQ(r.instructions[2].as<VariableArgs>().value, "/opt/app-1.0");
  EXPECT_EQ(r.instructions[3].as<WorkdirArgs>().path, "/opt/app-1.0/bin");
  EXPECT_EQ(r.instructions[4].as<CopyArgs>().sources, std::vector<std::string>{"src/1.0"});
  EXPECT_EQ(r.instructions[4].as<CopyArgs>().destination, "/opt/app-1.0/");
  // RUN text goes to the shell untouched; the variables are in its environment.
  EXPECT_EQ(r.instructions[5].as<RunArgs>().command, "echo $APP");
  EXPECT_TRUE(r.warnings.empty());
}

TEST(Parse, BuildArgOverridesDefault) {
  const auto r = parse("FROM a\nARG V=1\nENV X=$V", "Dockerfile", {{"V", "2"}});
  EXPECT_EQ(r.instructions[1].as<VariableArgs>().value, "1");  // the declared default
  EXPECT_EQ(r.instructions[2].as<VariableArgs>().value, "2");
}

TEST(Parse, BuildArgOnlyAfterDeclaration) {
  const auto r = parse("FROM a\nENV X=$V\nARG V\nENV Y=$V", "Dockerfile", {{"V", "2"}});
  EXPECT_EQ(r.instructions[1].as<VariableArgs>().value, "");
  EXPECT_EQ(r.instructions[3].as<VariableArgs>().value, "2");
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("V is not defined"), std::string::npos);
}

TEST(Parse, UndefinedVariableWarnsAndExpandsEmpty) {
  const auto r = parse("FROM a\nWORKDIR /x/${NOPE}/y", "Dockerfile");
  EXPECT_EQ(r.instructions[1].as<WorkdirArgs>().path, "/x//y");
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("Dockerfile:2"), std::string::npos);
}

TEST(Parse, UnusedBuildArgWarns) {
  const auto r = parse("FROM a", "Dockerfile", {{"UNUSED", "1"}});
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("UNUSED"), std::string::npos);
}

TEST(Parse, EnvForms) {
  const auto r = parse("FROM a\nENV A=1\nENV B two words\nENV C=\"quoted value\"\nENV D=", "Dockerfile");
  EXPECT_EQ(r.instructions[1].as<VariableArgs>().value, "1");
  EXPECT_EQ(r.instructions[2].as<VariableArgs>().value, "two words");
  EXPECT_EQ(r.instructions[3].as<VariableArgs>().value, "quoted value");
  EXPECT_EQ(r.instructions[4].as<VariableArgs>().value, "");
  EXPECT_EQ(parse_error_kind("FROM a\nENV A=1 B=2"), ParseErrorKind::Malformed);
}

TEST(Parse, RunningExampleInstructionCounts) {
  const std::pair<const char*, std::size_t> cases[] = {
      {"centos7.dockerfile", 3},
      {"debian10.dockerfile", 4},
      {"centos7-fr.dockerfile", 5},
      {"debian10-fr.dockerfile", 6},
  };
  for (const auto& [name, count] : cases) {
    const auto r = parse(t::read_file(t::data_path(name)), name);
    EXPECT_EQ(r.instructions.size(), count) << name;
  }
}

TEST(Parse, IsPure) {
  const std::string text = t::read_file(t::data_path("debian10-fr.dockerfile"));
  const auto a = parse(text, "x");
  const auto b = parse(text, "x");
  EXPECT_EQ(a.instructions, b.instructions);
}

TEST(ShellForm, WrapsPayloadVerbatim) {
  const auto r = parse("FROM a\nRUN echo hello\nRUN yum install -y openssh", "Dockerfile");
  EXPECT_EQ(shell_form(r.instructions[1]), (std::vector<std::string>{"/bin/sh", "-c", "echo hello"}));
  EXPECT_EQ(shell_form(r.instructions[2]), (std::vector<std::string>{"/bin/sh", "-c", "yum install -y openssh"}));
}

TEST(ShellForm, RejectsOtherKinds) {
  const auto r = parse("FROM a", "Dockerfile");
  EXPECT_THROW(shell_form(r.instructions[0]), WrongKind);
}

TEST(Serialize, KnownForms) {
  const auto r = parse("FROM centos:7\nCOPY a \"b c\" /d/\nENV K=\"v w\"\nARG N\nWORKDIR \"/a b\"", "Dockerfile");
  EXPECT_EQ(serialize(r.instructions[0]), "FROM centos:7");
  EXPECT_EQ(serialize(r.instructions[1]), "COPY a \"b c\" /d/");
  EXPECT_EQ(serialize(r.instructions[2]), "ENV K=\"v w\"");
  EXPECT_EQ(serialize(r.instructions[3]), "ARG N");
  EXPECT_EQ(serialize(r.instructions[4]), "WORKDIR \"/a b\"");
}

// Round trip over generated recipes: serialize each instruction onto its own
// line and parse again.
TEST(Serialize, RoundTripProperty) {
  std::mt19937 rng(20211116);
  const std::string alphabet = "abcXYZ019 _-./:'\"$\\#=@{}";
  auto word = [&](bool allow_empty) {
    std::uniform_int_distribution<int> len(allow_empty ? 0 : 1, 8);
    std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
    std::string w;
    for (int n = len(rng); n > 0; --n) w += alphabet[pick(rng)];
    return w;
  };
  auto name = [&] {
    static const char* names[] = {"A", "B_1", "path", "X"};
    return std::string(names[rng() % 4]);
  };

  for (int iter = 0; iter < 500; ++iter) {
    std::vector<Instruction> original;
    original.push_back({InstructionKind::From, FromArgs{"img" + std::to_string(iter % 7) + ":tag"}, 0});
    const int n = 1 + static_cast<int>(rng() % 8);
    for (int i = 0; i < n; ++i) {
      switch (rng() % 5) {
        case 0: {
          std::string cmd = word(false);
          // RUN text is trimmed and cannot end in a continuation.
          while (!cmd.empty() && (cmd.back() == '\\' || cmd.back() == ' ')) cmd.pop_back();
          while (!cmd.empty() && cmd.front() == ' ') cmd.erase(cmd.begin());
          if (cmd.empty()) cmd = "true";
          else if (cmd.front() == '[' || cmd.front() == '#') cmd = "true " + cmd;
          original.push_back({InstructionKind::Run, RunArgs{cmd}, 0});
          break;
        }
        case 1:
          // A leading "--" would read as an (unsupported) flag.
          original.push_back({InstructionKind::Copy, CopyArgs{{"s" + word(false), word(false)}, word(false)}, 0});
          break;
        case 2:
          original.push_back({InstructionKind::Env, VariableArgs{name(), word(true)}, 0});
          break;
        case 3: {
          VariableArgs a{name(), std::nullopt};
          if (rng() % 2) a.value = word(true);
          original.push_back({InstructionKind::Arg, a, 0});
          break;
        }
        default: {
          std::string p = "/" + word(false);
          while (!p.empty() && p.back() == ' ') p.pop_back();
          original.push_back({InstructionKind::Workdir, WorkdirArgs{p}, 0});
        }
      }
    }

    std::string text;
    for (const auto& ins : original) text += serialize(ins) + "\n";
    Recipe parsed;
    ASSERT_NO_THROW(parsed = parse(text, "generated")) << text;
    ASSERT_EQ(parsed.instructions.size(), original.size()) << text;
    for (std::size_t i = 0; i < original.size(); ++i) {
      Instruction expect = original[i];
      expect.line = static_cast<int>(i + 1);
      EXPECT_EQ(parsed.instructions[i], expect) << "instruction " << i << " of:\n" << text;
    }

    // And once more from the re-parsed form: serialize is a fixed point.
    std::string again;
    for (const auto& ins : parsed.instructions) again += serialize(ins) + "\n";
    EXPECT_EQ(again, text);
  }
}

TEST(Substitute, Forms) {
  const std::map<std::string, std::string> vars{{"A", "1"}, {"LONG_NAME", "x"}};
  std::vector<std::string> undefined;
  EXPECT_EQ(substitute("$A-${A}-$LONG_NAME.", vars, &undefined), "1-1-x.");
  EXPECT_EQ(substitute("\\$A costs $$", vars, &undefined), "$A costs $$");
  EXPECT_TRUE(undefined.empty());
  EXPECT_EQ(substitute("[$MISSING]", vars, &undefined), "[]");
  EXPECT_EQ(undefined, std::vector<std::string>{"MISSING"});
}
