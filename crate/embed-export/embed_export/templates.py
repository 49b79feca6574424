"""Prompt templates; a category's text row is the mean over all of them."""

PLACEHOLDER = "{category}"

TEMPLATES = (
    "An image of a {category}.",
    "This is an image of a {category}.",
    "An image of a small {category}.",
    "An image of a medium {category}.",
    "An image of a large {category}.",
    "An image of a {category} within the context.",
    "An image of the {category} within the context.",
    "An image of the {category} within the context.",
    "A resized image of a{category} within the context.",
    "This falls under a {category} within the context.",
    "This falls under the {category} within the context.",
    "This falls under one {category} within the context.",
)


def expand_templates(category):
    category = category.strip()
    if not category:
        raise ValueError("empty category name")
    return [t.replace(PLACEHOLDER, category) for t in TEMPLATES]
