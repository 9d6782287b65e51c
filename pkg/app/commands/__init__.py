from app.commands.data import cmd_gen_data
from app.commands.grid import cmd_attack, cmd_compare, cmd_extract, cmd_run_grid
from app.commands.reference import cmd_build_reference
from app.commands.report import cmd_report
from app.commands.train import cmd_train
from app.models import StageName

STAGES = {
    StageName.GEN_DATA: cmd_gen_data,
    StageName.TRAIN: cmd_train,
    StageName.BUILD_REFERENCE: cmd_build_reference,
    StageName.ATTACK: cmd_attack,
    StageName.EXTRACT: cmd_extract,
    StageName.COMPARE: cmd_compare,
    StageName.REPORT: cmd_report,
}
