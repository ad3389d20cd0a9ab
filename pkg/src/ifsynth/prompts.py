"""The five prompt templates used across the pipeline.

Templates contain literal braces (JSON examples, the ``Score: {{score}}``
directive), so slot substitution is done by literal replacement of the
declared slot markers only — see gateway.render_prompt.
"""

SELF_INSTRUCT = """\
You are an expert for writing instructions. Please provide {K} different instructions that meet the following requirements:
- Instructions are about the format but not style of a response
- Whether instructions are followed can be easily evaluate by a Python function
Here are some examples of instructions we need:
{Seed Instructions}
Do not generate instructions about writing style, using metaphor, or translation. Here are some examples of instructions we do not need:
- Incorporate a famous historical quote seamlessly into your answer
- Translate your answer into Pig Latin
- Use only words that are also a type of food
- Respond with a metaphor in every sentence
- Write the response as if you are a character from a Shakespearean play
Please generate one instruction per line in your response and start each line with '- '."""

VERIFIER_GEN = """\
You are an expert for writing evaluation functions in Python to evaluate whether a response strictly follows an instruction.
Here is the instruction: {instruction}
Please write a Python function named `evaluate` to evaluate whether an input string `response` follows this instruction. If it follows, simply return True, otherwise return False.
Please respond with a single JSON that includes the evaluation function in the key `func`, and a list of three test cases in the key `cases`, which includes an input in the key `input` and an expected output in the key `output` (True or False).
Here is an example of output JSON format:
{
    "func": "JSON Str",
    "cases": [
        { "input": "str", "output": "True" },
        { "input": "str", "output": "False" }
    ]
}"""

BACK_TRANSLATE = """\
You are an expert in converting Python eval function code into the corresponding instruction text. I will provide the eval function code. Please strictly follow the code to convert it into the corresponding instruction text.
Here's an example:
{Example func}
{Example cases}

Please convert the following eval function into instructions stored in a list:
{funcs}"""

RESPONSE_GEN = """\
Please answer the query strictly following the instruction.
Instruction: {instruction}
Query: {query}"""

QUALITY_JUDGE = """\
You are an expert that is good at judging whether a response is following the instruction and query.
Instruction: {instruction}
Query: {query}
Response: {response}
Please notice that the response may not be helpful as it needs to strictly follow the requirements in the Instruction.
You need to judge whether the response answers the query. Please first provide a detailed analysis and then give a score ranking from 0 to 10 at the last line.
Scoring 0 means the response is totally unrelated to the query, while scoring 10 means the response is helpful and highly related to the query.
Please only provide a score in the format `Score: {{score}}` without any other contents at the last line."""

# slot names each template expects, in documented order
TEMPLATE_SLOTS = {
    "self_instruct": ("K", "Seed Instructions"),
    "verifier_gen": ("instruction",),
    "back_translate": ("Example func", "Example cases", "funcs"),
    "response_gen": ("instruction", "query"),
    "quality_judge": ("instruction", "query", "response"),
}

TEMPLATE_TEXT = {
    "self_instruct": SELF_INSTRUCT,
    "verifier_gen": VERIFIER_GEN,
    "back_translate": BACK_TRANSLATE,
    "response_gen": RESPONSE_GEN,
    "quality_judge": QUALITY_JUDGE,
}
