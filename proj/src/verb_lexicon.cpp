#include "cvqa/linguistic.hpp"

namespace cvqa::lang {

const std::vector<std::string>& verb_base_lexicon() {
  static const std::vector<std::string> verbs = {
      "accelerate", "act",      "answer",  "appear",  "approach", "arrive",
      "ask",        "attack",   "avoid",   "back",    "bark",     "begin",
      "bend",       "bite",     "block",   "blow",    "board",    "bounce",
      "brake",      "break",    "bring",   "build",   "bump",     "burn",
      "buy",        "call",     "carry",   "catch",   "change",   "chase",
      "check",      "choose",   "clap",    "clean",   "climb",    "close",
      "collide",    "come",     "continue", "cook",   "count",    "crash",
      "crawl",      "cross",    "cry",     "cut",     "dance",    "deliver",
      "dig",        "dodge",    "drag",    "draw",    "drink",    "drive",
      "drop",       "eat",      "emerge",  "enter",   "escape",   "exit",
      "explain",    "fail",     "fall",    "fight",   "find",     "finish",
      "fix",        "flee",     "flip",    "float",   "fly",      "fold",
      "follow",     "forget",   "freeze",  "gather",  "get",      "give",
      "go",         "grab",     "grow",    "hand",    "hang",     "happen",
      "hear",       "help",     "hide",    "hit",     "hold",     "hop",
      "hurry",      "ignore",   "injure",  "jog",     "join",     "jump",
      "keep",       "kick",     "knock",   "know",    "land",     "laugh",
      "lay",        "lead",     "lean",    "leave",   "lie",      "lift",
      "light",      "listen",   "look",    "lose",    "make",     "meet",
      "merge",      "move",     "notice",  "obstruct", "occur",   "open",
      "overtake",   "paint",    "park",    "pass",    "pay",      "pedal",
      "pick",       "place",    "play",    "point",   "pull",     "push",
      "put",        "race",     "raise",   "reach",   "read",     "remove",
      "repair",     "rescue",   "rest",    "retreat", "return",   "reverse",
      "ride",       "ring",     "rise",    "roll",    "run",      "rush",
      "say",        "scatter",  "see",     "sell",    "send",     "shake",
      "shout",      "show",     "signal",  "sing",    "sink",     "sit",
      "skate",      "skid",     "sleep",   "slide",   "slip",     "slow",
      "smash",      "speak",    "speed",   "spend",   "spill",    "spin",
      "stand",      "start",    "stay",    "steal",   "steer",    "step",
      "stick",      "stop",     "strike",  "stumble", "swerve",   "swim",
      "swing",      "take",     "talk",    "teach",   "tear",     "tell",
      "think",      "throw",    "tip",     "topple",  "touch",    "tow",
      "travel",     "trip",     "try",     "tumble",  "turn",     "veer",
      "visit",      "wait",     "wake",    "walk",    "want",     "watch",
      "wave",       "wear",     "win",     "work",    "write",    "yield",
  };
  return verbs;
}

const std::map<std::string, std::string>& irregular_past_map() {
  static const std::map<std::string, std::string> m = {
      {"ate", "eat"},       {"began", "begin"},   {"bent", "bend"},
      {"bit", "bite"},      {"blew", "blow"},     {"bought", "buy"},
      {"broke", "break"},   {"brought", "bring"}, {"built", "build"},
      {"came", "come"},     {"caught", "catch"},  {"chose", "choose"},
      {"cut", "cut"},       {"drank", "drink"},
      {"drew", "draw"},     {"drove", "drive"},   {"dug", "dig"},
      {"fell", "fall"},     {"fled", "flee"},     {"flew", "fly"},
      {"forgot", "forget"}, {"froze", "freeze"},  {"gave", "give"},
      {"got", "get"},       {"grew", "grow"},     {"heard", "hear"},
      {"held", "hold"},     {"hid", "hide"},      {"hit", "hit"},
      {"hung", "hang"},     {"kept", "keep"},     {"knew", "know"},
      {"laid", "lay"},      {"led", "lead"},      {"left", "leave"},
      {"lit", "light"},     {"lost", "lose"},     {"made", "make"},
      {"met", "meet"},      {"paid", "pay"},      {"put", "put"},
      {"ran", "run"},       {"rang", "ring"},     {"read", "read"},
      {"rode", "ride"},     {"rose", "rise"},     {"said", "say"},
      {"sang", "sing"},     {"sank", "sink"},     {"sat", "sit"},
      {"saw", "see"},       {"slept", "sleep"},   {"slid", "slide"},
      {"sold", "sell"},     {"sent", "send"},     {"spent", "spend"},
      {"spoke", "speak"},   {"stole", "steal"},   {"stood", "stand"},
      {"struck", "strike"}, {"stuck", "stick"},   {"swam", "swim"},
      {"swung", "swing"},   {"taught", "teach"},  {"told", "tell"},
      {"took", "take"},     {"tore", "tear"},     {"thought", "think"},
      {"threw", "throw"},   {"went", "go"},       {"woke", "wake"},
      {"won", "win"},       {"wore", "wear"},     {"wrote", "write"},
  };
  return m;
}

const std::set<std::string>& auxiliary_set() {
  static const std::set<std::string> s = {
      "am",    "is",    "are",   "was",    "were", "be",   "been", "being",
      "do",    "does",  "did",   "done",   "have", "has",  "had",  "having",
      "will",  "would", "shall", "should", "may",  "might", "must", "can",
      "could", "ought",
  };
  return s;
}

}  // namespace cvqa::lang
