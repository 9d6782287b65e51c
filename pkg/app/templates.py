from jinja2 import Environment, FileSystemLoader, StrictUndefined
import os


# Get the templates directory (app/templates)
template_dir = os.path.join(os.path.dirname(os.path.abspath(__file__)), "templates")

env = Environment(
    loader=FileSystemLoader(template_dir),
    keep_trailing_newline=True,
    trim_blocks=True,
    lstrip_blocks=True,
    undefined=StrictUndefined,
)


def fmt(value, digits: int = 4) -> str:
    if value is None:
        return "-"
    return f"{value:.{digits}f}"


env.filters["fmt"] = fmt


def render_template(name: str, context: dict) -> str:
    if not name.endswith('.j2'):
        name += '.j2'
    template = env.get_template(name)
    return template.render(**context)
