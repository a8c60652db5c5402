#!/usr/bin/env python3
"""Regenerate the bundled deterministic fixture under data/fixture/.

Synthesizes 50 concepts and 500 multilingual entities with gold alignments.
Construction targets:

  * every gold entity is lexically findable (it shares low-idf multilingual
    aliases and many character n-grams with its concept), so BM25 keeps it
    inside the top 64;
  * the concept's exact English stem token appears only on topical
    near-miss entities, and most concepts carry a short ambiguous alias
    that is also a person name with a tiny alias field, so first-stage
    BM25 rarely puts the gold at rank 1;
  * the gold is cleanly separable by pair features: shared language tags,
    one exactly matching multilingual alias, and char n-gram overlap
    through the morphed name stem.

Deterministic: a fixed seed drives all sampling.  Run from the repo root:

    python3 scripts/make_fixture.py
"""

import pathlib
import random
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from kbalign.corpus import (  # noqa: E402
    AliasTerm,
    AlignmentRecord,
    Concept,
    WikiEntity,
    write_alignments,
    write_concepts,
    write_entities,
)

SEED = 97
N_CONCEPTS = 50
N_EASY = 5              # concepts without a person-name trap
N_ENTITIES = 500
FAMILY_PER_CONCEPT = 3  # topical near-misses carrying the concept's stem form

OUT_DIR = pathlib.Path(__file__).resolve().parents[1] / "data" / "fixture"

# one unique onset per concept; the concept and its gold use different
# suffixes of the same onset, so tokens differ but char n-grams overlap
ONSETS = ["gastr", "cardi", "nephr", "derm", "neur", "hepat", "pulm", "arthr",
          "oste", "myel", "cephal", "angi", "chondr", "fibr", "glyc", "kerat",
          "lymph", "melan", "oncol", "phleb", "rhin", "scler", "thromb",
          "vascul", "adren", "bronch", "cerebr", "cholec", "colon", "cran",
          "cyst", "duoden", "encephal", "enter", "esophag", "gingiv", "gloss",
          "hemat", "laryng", "mening", "myocard", "ocul", "ophthalm", "ot",
          "pancreat", "pharyng", "pleur", "retin", "splen", "thyroid"]
SUFFIXES = ["osis", "itis", "emia", "algia", "opathy", "oma", "ectasia"]

TYPE_WORDS = ["syndrome", "disorder", "disease", "condition", "deficiency",
              "lesion", "anomaly"]
FAMILY_WORDS = ["pathway", "receptor", "marker", "screening", "therapy",
                "gene", "antigen"]

GIVEN_NAMES = ["berd", "falko", "tjalf", "gunda", "ilvy", "ossian", "wenke",
               "jarle", "smilla", "eike", "runa", "vito", "alva", "niko",
               "selva", "odile", "janne", "lore", "bendt", "fenna", "arvid",
               "liv", "norun", "edda", "silje", "tarek", "mira", "joris",
               "katla", "sverre", "yrsa", "holger", "idun", "leif", "magda",
               "nanna", "ove", "petra", "ragna", "sten", "tove", "ulrik",
               "vigdis", "wim", "ylva"]
SURNAMES = ["hansen", "muller", "bakker", "lindgren", "kovacs", "novak",
            "haugen", "virtanen", "devries", "jansen"]

# small multilingual pools reused across many entities keep the exact
# matches low-idf for BM25 while the feature scorer still sees them
ES_WORDS = ["sindrome", "enfermedad", "trastorno", "cronica", "aguda",
            "vascular", "renal", "benigna"]
KATAKANA = list("アイウエオカキクケコサシ")
CYRILLIC_STEMS = ["гастр", "кард", "нефр", "дерм", "невр", "гепат", "пульм",
                  "артр", "осте", "миел", "цефал", "анги", "хондр", "фибр",
                  "глик", "керат", "лимф", "мелан", "онко", "флеб", "рин",
                  "склер", "тромб", "васкул", "адрен"]

FILLER_ONSETS = ["plasm", "cyt", "gen", "immun", "bio", "micro", "macro",
                 "hydro", "therm", "photo", "electro", "magneto", "chrono",
                 "geo", "aero"]


def ja_name(rng):
    return "".join(rng.choice(KATAKANA) for _ in range(4))


def es_phrase(rng):
    return " ".join(rng.sample(ES_WORDS, 2))


def main():
    rng = random.Random(SEED)
    onsets = ONSETS[:N_CONCEPTS]
    rng.shuffle(onsets)
    qid_numbers = iter(rng.sample(range(1000, 900000), N_ENTITIES + 50))
    cui_numbers = iter(rng.sample(range(1, 10**7), N_CONCEPTS))

    concepts, entities, alignments = [], [], []
    names = GIVEN_NAMES[:]
    rng.shuffle(names)

    for i, onset in enumerate(onsets):
        cui = f"C{next(cui_numbers):07d}"
        easy = i < N_EASY
        given = names[i % len(names)]
        suffix_c, suffix_g, suffix_alt = rng.sample(SUFFIXES, 3)
        type_c, type_g, type_alt = rng.sample(TYPE_WORDS, 3)
        concept_form = onset + suffix_c            # e.g. gastrosis
        gold_form = concept_form if easy else onset + suffix_g  # e.g. gastritis
        full_en = f"{concept_form} {type_c}"
        gold_title = full_en if easy else f"{gold_form} {type_g}"
        es_shared = es_phrase(rng)
        ja_shared = ja_name(rng)
        ru_stem = CYRILLIC_STEMS[i % len(CYRILLIC_STEMS)]

        concept_aliases = [
            AliasTerm(given.capitalize(), "en"),
            AliasTerm(full_en, "en"),
            AliasTerm(es_shared, "es"),
            AliasTerm(ja_shared, "ja"),
            AliasTerm(f"{ru_stem}ния", "ru"),
            AliasTerm(f"{onset}aandoening", "nl"),
        ]
        if easy:
            concept_aliases.pop(0)  # no ambiguous short alias
        concepts.append(Concept(cui=cui, aliases=concept_aliases))

        gold_qid = f"Q{next(qid_numbers)}"
        gold_aliases = [
            AliasTerm(gold_title, "en"),
            AliasTerm(f"{gold_form} {type_alt}", "en"),
            AliasTerm(es_shared, "es"),
            AliasTerm(ja_shared, "ja"),
            AliasTerm(f"{ru_stem}ческая болезнь", "ru"),
            AliasTerm(f"{onset}ziekte", "nl"),
            AliasTerm(f"{onset}krankheit", "de"),
            AliasTerm(f"maladie {onset}ique", "fr"),
        ]
        gold = WikiEntity(
            qid=gold_qid,
            title=gold_title,
            aliases=gold_aliases,
            text=f"{gold_title} is a medical {type_g} of the {onset} system.",
            umls_cui=cui,
        )
        entities.append(gold)
        alignments.append(
            AlignmentRecord(
                cui=cui,
                concept_aliases=concepts[-1].aliases,
                wiki_title=gold.title,
                qid=gold.qid,
                wiki_aliases=gold.aliases,
            )
        )

        if not easy:
            # the BM25 trap: a person entity whose tiny alias field carries
            # the unique short name, so length normalization favors it
            surname = rng.choice(SURNAMES)
            person_title = f"{given.capitalize()} {surname.title()}"
            entities.append(
                WikiEntity(
                    qid=f"Q{next(qid_numbers)}",
                    title=person_title,
                    aliases=[
                        AliasTerm(given.capitalize(), "en"),
                        AliasTerm(person_title, "en"),
                    ],
                )
            )

        # topical near-misses: they carry the concept's exact stem form, so
        # they absorb its idf mass while the gold only shares n-grams
        for word in rng.sample(FAMILY_WORDS, FAMILY_PER_CONCEPT):
            entities.append(
                WikiEntity(
                    qid=f"Q{next(qid_numbers)}",
                    title=f"{concept_form} {word}",
                    aliases=[AliasTerm(f"{concept_form} {word}", "en")],
                )
            )

    # filler entities: raise document frequencies of the shared multilingual
    # pools so the gold's exact matches stay low-idf for BM25
    while len(entities) < N_ENTITIES:
        fstem = rng.choice(FILLER_ONSETS) + rng.choice(SUFFIXES)
        ftype = rng.choice(TYPE_WORDS + FAMILY_WORDS)
        title = f"{fstem} {ftype}"
        aliases = [AliasTerm(title, "en")]
        roll = rng.random()
        if roll < 0.5:
            aliases.append(AliasTerm(es_phrase(rng), "es"))
        if roll < 0.35:
            aliases.append(AliasTerm(ja_name(rng), "ja"))
        if roll < 0.15:
            aliases.append(AliasTerm(f"{rng.choice(CYRILLIC_STEMS)}обла", "ru"))
        text = None
        if rng.random() < 0.2:
            text = f"{title} relates to {rng.choice(TYPE_WORDS)} research."
        entities.append(
            WikiEntity(
                qid=f"Q{next(qid_numbers)}", title=title, aliases=aliases, text=text
            )
        )

    rng.shuffle(entities)

    OUT_DIR.mkdir(parents=True, exist_ok=True)
    write_concepts(concepts, OUT_DIR / "concepts.jsonl")
    write_entities(entities, OUT_DIR / "entities.jsonl")
    write_alignments(
        sorted(alignments, key=lambda r: r.cui), OUT_DIR / "alignments.jsonl"
    )
    print(
        f"wrote {len(concepts)} concepts, {len(entities)} entities, "
        f"{len(alignments)} alignments to {OUT_DIR}"
    )


if __name__ == "__main__":
    main()
