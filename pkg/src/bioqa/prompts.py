"""Prompt text for every LLM step.

The strings are kept byte-for-byte as the original system sent them,
including the stray ``\\ `` after the blank line in the answer prompts and
the trailing space in the rerank prompt.
"""

from __future__ import annotations

import json
from typing import Sequence

BIOASQ_SYSTEM = (
    "You are BioASQ-GPT, an AI expert in question answering, research, and "
    "information retrieval in the biomedical domain."
)

MEDPROCNER_SYSTEM = (
    "Eres un asistente útil que extrae procedimientos médicos de textos médicos en español. "
    "Un procedimiento médico se refiere a cualquier acción diagnóstica, terapéutica, médica o "
    "quirúrgica realizada en un paciente. Tu respuesta debe ser una lista de procedimientos en "
    "formato JSON válido."
)

EXPANSION_PREFIX = "Expand this search query:\n"
REFORMULATION_PREFIX = "Given that the following search query for PubMed has returned\nno documents"

_EXPANSION = (
    EXPANSION_PREFIX + "'{question}' for PubMed by incorporating synonyms and additional terms "
    "that closely relate to the main topic and help reduce ambiguity. Assume that phrases are not "
    "stemmed; therefore, generate useful variations. Return only the query that can directly be "
    "used without any explanation text. Focus on maintaining the query's precision and relevance "
    "to the original question."
)

_REFORMULATION = (
    REFORMULATION_PREFIX + ", please generate a broader query that retains the original "
    "question's context and relevance. Assume that phrases are not stemmed; therefore, generate "
    "useful variations. Return only the query that can directly be used without any explanation "
    "text. Focus on maintaining the query's precision and relevance to the original question. "
    "Original question: '{question}', Original query: '{original_query}'."
)

_RERANK = (
    "{articles_str} \n\n Given these articles and the question: '{question}'. Rerank the articles "
    "based on their relevance to the question and return the top {nr_of_articles} most relevant "
    "articles as a comma separated list of their index ids. Don't explain your answer, return "
    "only this list, for example: '1, 2, 3, 4' "
)

_ANSWER_HEAD = " {snippets}\n\n\\ '{body}'. "

_IDEAL = (
    _ANSWER_HEAD + "Answer this question by returning a single paragraph-sized text ideally "
    "summarizing the most relevant information. The maximum allowed length of the answer is 200 "
    "words. The returned answer is intended to approximate a short text that a biomedical expert "
    "would write to answer the corresponding question (e.g., including prominent supportive "
    "information)."
)

_YESNO = (
    _ANSWER_HEAD + "You *must answer* only with lowercase 'yes' or 'no' even if you are not sure "
    "about the answer."
)

_FACTOID = (
    _ANSWER_HEAD + "Answer this question by returning only a JSON string array of entity names, "
    "numbers, or similar short expressions that are an answer to the question, ordered by "
    "decreasing confidence. The array should contain at max 5 elements but can contain less. If "
    "you don't know any answer return an empty list. Return only this list, it must not contain "
    "phrases and **must be valid JSON**."
)

_LIST = (
    _ANSWER_HEAD + "Answer this question by only returning a JSON string array of entity names, "
    "numbers, or similar short expressions that are an answer to the question (e.g., the most "
    "common symptoms of a disease). The returned list will have to contain no more than 100 "
    "entries of no more than 100 characters each. If you don't know any answer return an empty "
    "list. Return only this list, it must not contain phrases and **must be valid JSON**."
)

_MEDPROC_FINAL = (
    "Extraiga todos los procedimientos médicos del texto delimitado por tres comillas invertidas. "
    "Devuelve una lista vacía si no se menciona ninguno. {text}"
)


# str.format would choke on braces inside questions or titles, so substitute by hand.
def _fill(template: str, **values: str) -> str:
    out = []
    i = 0
    while i < len(template):
        if template[i] == "{":
            end = template.index("}", i)
            out.append(values[template[i + 1 : end]])
            i = end + 1
        else:
            out.append(template[i])
            i += 1
    return "".join(out)


def expansion(question: str) -> str:
    return _fill(_EXPANSION, question=question)


def reformulation(question: str, original_query: str) -> str:
    return _fill(_REFORMULATION, question=question, original_query=original_query)


def articles_block(titles: Sequence[str]) -> str:
    return "\n".join(f"{i}. {t}" for i, t in enumerate(titles, start=1))


def rerank(titles: Sequence[str], question: str, nr_of_articles: int) -> str:
    return _fill(
        _RERANK,
        articles_str=articles_block(titles),
        question=question,
        nr_of_articles=str(nr_of_articles),
    )


def ideal(snippets: str, body: str) -> str:
    return _fill(_IDEAL, snippets=snippets, body=body)


def yesno(snippets: str, body: str) -> str:
    return _fill(_YESNO, snippets=snippets, body=body)


def factoid(snippets: str, body: str) -> str:
    return _fill(_FACTOID, snippets=snippets, body=body)


def listans(snippets: str, body: str) -> str:
    return _fill(_LIST, snippets=snippets, body=body)


def medproc_final(text: str) -> str:
    return _fill(_MEDPROC_FINAL, text=text)


def medproc_example_output(procedures: Sequence[str]) -> str:
    # default json.dumps settings (ASCII escapes) as in the original prompt code
    return json.dumps(list(procedures))
